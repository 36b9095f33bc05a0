"""Exception types shared across the package."""


class RobustCLError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RobustCLError):
    """Shapes or sizes of operands do not compose."""


class ParameterError(RobustCLError):
    """A scalar setting is outside its documented range."""


class ContractError(RobustCLError):
    """An operation was called in a way its contract forbids."""


class TaskLookupError(RobustCLError):
    """A referenced task id has no head or dataset."""


class DegenerateFeatureError(RobustCLError):
    """A feature row has near-zero norm and cannot sit on the unit sphere."""


class ConfigError(RobustCLError):
    """Experiment configuration failed validation."""


class FormatError(RobustCLError):
    """An input file does not match its binary format contract."""
