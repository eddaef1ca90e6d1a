"""Exception taxonomy shared by every module in the package.

The CLI maps :class:`BadConfig` (and flag-usage problems) to exit code 1
and every other :class:`CmmError` or I/O failure to exit code 2.
"""


class CmmError(Exception):
    """Base class for all errors raised by this package."""


class BadConfig(CmmError):
    """A configuration value violates its documented constraints."""


# --- numerics ---------------------------------------------------------------

class ZeroNorm(CmmError):
    """A vector that must be normalized has (near-)zero Euclidean norm."""


class DegenerateData(CmmError):
    """Input carries no variance (e.g. all PCA rows identical)."""


class NotSymmetric(CmmError):
    pass


class NotPSD(CmmError):
    """A matrix required to be positive semi-definite has a significantly
    negative eigenvalue."""


# --- embedding cache on-disk format -----------------------------------------

class MissingFile(CmmError):
    pass


class BadMagic(CmmError):
    pass


class BadVersion(CmmError):
    pass


class DimensionMismatch(CmmError):
    """Manifest counts and blob sizes (or index ranges) disagree."""


class LabelOutOfRange(CmmError):
    pass


class NonNormalizedRow(CmmError):
    """A stored feature row deviates from unit norm by more than 1e-5."""


class IoError(CmmError):
    pass


class InsufficientSamples(CmmError):
    def __init__(self, class_index: int, available: int, requested: int):
        super().__init__(
            f"class {class_index} has {available} base samples, "
            f"{requested} requested"
        )
        self.class_index = class_index
        self.available = available
        self.requested = requested


# --- model / losses ----------------------------------------------------------

class DimMismatch(CmmError):
    pass


class SingleClass(CmmError):
    """An operation needs at least two classes."""


class TapeMismatch(CmmError):
    """A backward pass received a tape from a different forward pass."""


# --- optimizer / trainer ------------------------------------------------------

class ShapeMismatch(CmmError):
    pass


class NonFiniteGradient(CmmError):
    pass


class OutOfRange(CmmError):
    pass


class NonFiniteLoss(CmmError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value!r} at step {step}")
        self.step = step
        self.value = value


# --- evaluation / diagnostics --------------------------------------------------

class EmptyBatch(CmmError):
    pass


class EmptyValSplit(CmmError):
    pass


class TooFewSamples(CmmError):
    pass


class SingularCovariance(CmmError):
    pass
