"""Exception types raised across the package."""


class DRSLError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DRSLError, ValueError):
    """Shapes or lengths do not agree."""


class NumericError(DRSLError, ArithmeticError):
    """Non-finite values, or a numerically undefined quantity (zero norm, zero variance)."""


class ContractError(DRSLError, ValueError):
    """An operation was called outside its documented preconditions."""


class ReuseError(ContractError):
    """A tape was replayed a second time."""


class LabelError(DRSLError, ValueError):
    """A class label lies outside ``[0, num_classes)``."""


class ConfigError(DRSLError, ValueError):
    """Invalid model, loss, attack or experiment configuration."""


class FormatError(DRSLError, ValueError):
    """A data or checkpoint file does not follow its binary layout."""


class LengthError(FormatError):
    """A file is shorter or longer than its header says."""


class ComparisonError(DRSLError, ValueError):
    """Two reports cannot be compared (different seeds or epsilon grids)."""


class ConsistencyError(DRSLError, ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""
