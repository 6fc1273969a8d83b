"""Write the synthetic bright-square corpus in the class-folder layout the CLI expects.

    python scripts/make_synthetic_corpus.py data/synthetic --seed 0
"""

import argparse

from cogdet.synthetic import write_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("root", help="output directory")
    parser.add_argument("--images", type=int, default=240)
    parser.add_argument("--videos", type=int, default=80)
    parser.add_argument("--detection", type=int, default=240)
    parser.add_argument("--frames", type=int, default=8, help="frames per video")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    paths = write_corpus(args.root, args.images, args.videos, args.detection, args.frames, args.seed)
    for name, path in paths.items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
