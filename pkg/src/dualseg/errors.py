"""Exception types shared across the package."""


class DualsegError(Exception):
    """Base class for all package errors."""


class ShapeError(DualsegError, ValueError):
    """Tensor/operand shapes are inconsistent; message names the offending dimension."""


class CheckpointError(DualsegError, ValueError):
    """Checkpoint file is malformed, truncated or belongs to another config."""


class ManifestError(DualsegError, ValueError):
    """Dataset manifest is malformed or references missing files."""


class CalibrationError(DualsegError, ValueError):
    """Quantization scheme is missing or inconsistent with the model."""
