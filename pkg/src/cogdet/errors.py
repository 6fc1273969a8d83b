"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CogdetError(Exception):
    exit_code = 1


class ConfigError(CogdetError):
    exit_code = 2


class ValidationError(CogdetError, ValueError):
    exit_code = 2


class DependencyError(ConfigError):
    """A required upstream artifact (e.g. a checkpoint) is missing."""


class LoadError(ConfigError):
    pass


class CapabilityError(ValidationError):
    pass


class TrainingError(CogdetError):
    exit_code = 3

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DataError(CogdetError):
    exit_code = 4


class EmptyDatasetError(DataError):
    pass


class LayoutError(DataError):
    pass


class IngestError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class LookupFailure(DataError, LookupError):
    pass
