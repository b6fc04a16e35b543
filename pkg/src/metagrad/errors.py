"""Exception types shared across the package.

Each failure family gets its own class so callers (and the CLI exit-code
mapping) can tell configuration mistakes, data/model integrity problems,
and numerical failures apart without parsing messages.
"""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class ConfigError(ValueError):
    """A configuration value violates its documented contract."""


class ModelFormatError(ValueError):
    """A serialized model file is malformed, truncated, or mismatched."""


class DatasetFormatError(ValueError):
    """A dataset file exists but does not decode to valid records."""


class IntegrityError(RuntimeError):
    """Stored artifacts disagree with their recorded fingerprints."""


class TrainingDivergenceError(RuntimeError):
    """Training produced non-finite loss and was aborted."""
