"""Exception types shared across the engine.

Everything derives from LiftError so CLI entry points can map any
engine-level failure to exit code 2 in one place.
"""


class LiftError(Exception):
    pass


class FormatError(LiftError):
    """Malformed input file (cloud, config or weight file)."""


class RangeError(LiftError):
    """Value outside the domain a caller was required to enforce."""


class ShapeError(LiftError):
    """Tensor/channel dimensions do not line up."""


class StructuralError(LiftError):
    """Layer or weight-file structure violates an invariant."""


class CalibrationError(LiftError):
    """Quantization calibration could not be performed."""


class ParameterError(LiftError):
    """Invalid analysis or configuration parameter."""
