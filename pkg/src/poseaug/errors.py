"""Exception hierarchy shared across the package.

Exit-code mapping (see cli): ConfigError/InputError -> 1,
ComputeError -> 2, VerificationError -> 3.
"""


class PoseAugError(Exception):
    """Base class for all package errors."""


class ConfigError(PoseAugError):
    """Invalid configuration: bad dimensions, counts, or option values."""


class InputError(PoseAugError):
    """Malformed input data: files, landmark sets, labels."""


class ShapeError(PoseAugError):
    """Tensor operands with incompatible shapes."""


class ContractError(PoseAugError):
    """An internal contract was violated (non-scalar loss, norm drift, ...)."""


class ComputeError(PoseAugError):
    """Runtime numerical failure, e.g. non-finite loss during training."""


class VerificationError(PoseAugError):
    """A verification pass (gradient check) exceeded its tolerance."""
