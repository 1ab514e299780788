"""Exception types shared across the package."""


class DyqError(Exception):
    """Base class for all dyq errors."""


class ShapeError(DyqError):
    """Tensor rank/extent mismatch or invalid shape."""


class RangeError(DyqError):
    """Value outside the representable range of the target bit-width."""


class FormatError(DyqError):
    """Malformed container or manifest (bad magic, version, or payload)."""


class DegenerateRange(DyqError):
    """Calibrated range cannot define a positive quantization scale."""


class DomainError(DyqError):
    """Argument outside the mathematical domain of an operation."""


class AccumulatorOverflow(DyqError):
    """A partial sum left the signed 32-bit accumulator range."""


class NumericalError(DyqError):
    """Numerically unsafe parameter (e.g. near-zero batch-norm sigma)."""


class MissingCalibration(DyqError):
    """No calibrated range for an activation site that needs one."""


class MissingLatencyEntry(DyqError):
    """Latency table lacks an entry for a (layer, bits) pair."""


class Infeasible(DyqError):
    """No bit assignment satisfies the active constraints."""

    def __init__(self, message, violated=()):
        super().__init__(message)
        self.violated = tuple(violated)


# Container I/O failures raise the interpreter's native OSError.
IoError = OSError
