"""Exception and warning types shared across the library."""


class DevmatError(Exception):
    """Base class for all library-specific errors."""


class DimensionError(DevmatError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op, shape_a, shape_b=None):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b) if shape_b is not None else None
        if self.shape_b is None:
            msg = f"{op}: invalid shape {self.shape_a[0]}x{self.shape_a[1]}"
        else:
            msg = (
                f"{op}: incompatible shapes "
                f"{self.shape_a[0]}x{self.shape_a[1]} and "
                f"{self.shape_b[0]}x{self.shape_b[1]}"
            )
        super().__init__(msg)


class ElemTypeError(DevmatError, TypeError):
    """Element types of the operands do not match or are unsupported."""


class BoundsError(DevmatError, IndexError):
    """Checked element or region access out of range."""


class PrecisionUnsupportedError(DevmatError, RuntimeError):
    """A 64-bit float operation was requested on a device without f64 support."""


class BackendError(DevmatError, RuntimeError):
    """Runtime initialisation or backend selection failed."""


class BufferError_(DevmatError, RuntimeError):
    """Invalid device buffer use (released handle, cross-device mix, overflow)."""


class SingularMatrixError(DevmatError, RuntimeError):
    """Exactly singular input where a factorization requires a nonzero pivot."""


class NotPositiveDefiniteError(DevmatError, RuntimeError):
    """Cholesky pivot failure; carries the failing pivot index."""

    def __init__(self, pivot_index):
        self.pivot_index = pivot_index
        super().__init__(f"matrix is not positive definite (pivot {pivot_index})")


class NotSymmetricError(DevmatError, RuntimeError):
    """Symmetric input required (checked to tolerance)."""


class KernelCacheWarning(UserWarning):
    """Kernel cache file was unreadable or corrupt; falling back to cold start."""
