"""Exception hierarchy shared by every lvit module.

The CLI maps these onto its documented exit codes, so new failure modes
should subclass the closest existing error rather than ``Exception``.
"""


class LvitError(Exception):
    """Base class for all lvit errors."""


class ShapeError(LvitError, ValueError):
    """Tensor shapes are inconsistent with an operation."""


class ContractError(LvitError, ValueError):
    """A documented precondition was violated by the caller."""


class ParameterError(LvitError, ValueError):
    """A numeric hyperparameter is outside its valid range."""


class ConfigError(LvitError, ValueError):
    """A configuration file or flag could not be resolved."""


class IngestError(LvitError):
    """Image data could not be found, decoded or preprocessed."""


class FormatError(IngestError):
    """A binary container (Phoenix file, checkpoint) is malformed."""


class TruncationError(FormatError):
    """A binary container ended before its declared payload."""


class CompatibilityError(LvitError):
    """Checkpoint tensors or class counts disagree with a configuration."""


class NumericalError(LvitError, ArithmeticError):
    """Training produced a non-finite value."""


class GradCheckError(LvitError):
    """Analytic or numeric gradient was non-finite."""
