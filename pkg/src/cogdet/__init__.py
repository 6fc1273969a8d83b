"""Classification-oriented gun detection in videos.

A frame-level backbone fine-tuned on augmented gun images feeds a temporal
sequence head that decides whether a video contains a gun; a grid-based
single-pass detector then localizes guns only in the videos that head
accepts.
"""

__version__ = "0.1.0"
