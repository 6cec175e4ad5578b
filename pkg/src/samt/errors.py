"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class LabelError(ValueError):
    """A class label is outside the valid range."""


class DataFormatError(ValueError):
    """A data file is malformed (bad magic, truncation, bad cell, ...)."""


class PlanError(ValueError):
    """A block partition is overlapping or incomplete."""


class ConfigError(ValueError):
    """A configuration key or value is invalid."""


class SuiteFailure(AssertionError):
    """A verification suite found a violated inequality."""
