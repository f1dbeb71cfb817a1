"""Exception types raised across the package.

Invalid arguments raise plain ``ValueError`` subclasses so callers can keep
catching the builtin.
"""


class DegenerateFeatureError(ValueError):
    """A feature vector has (near) zero norm, so cosine is undefined."""


class ConfigError(ValueError):
    """Bad config file: unknown key, unparsable value or malformed line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingStageError(RuntimeError):
    """An upstream pipeline stage has not produced its artifacts yet."""

    def __init__(self, stage, path):
        super().__init__(
            f"missing output of stage '{stage}' (expected {path}); "
            f"run `stnet {stage}` first"
        )
        self.stage = stage
        self.path = path


class NumericalAbort(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message, batch_ids=None, dump_path=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids or [])
        self.dump_path = dump_path


class SplitError(ValueError):
    pass
