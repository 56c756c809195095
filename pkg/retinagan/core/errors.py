#!/usr/bin/env python3
"""
RetinaGAN error hierarchy.

Every failure the library raises on purpose derives from RetinaGANError so the
CLI can report it with one except clause.
"""


class RetinaGANError(Exception):
    """Base class for all RetinaGAN errors."""


class ShapeError(RetinaGANError, ValueError):
    """Tensor or array shapes do not fit the operation."""


class NonFiniteError(RetinaGANError, ArithmeticError):
    """A forward value or loss term became NaN or Inf."""


class GradientError(RetinaGANError, ValueError):
    """Invalid backward request or invalid gradients handed to an optimizer."""


class LossInputError(RetinaGANError, ValueError):
    """Loss called with targets outside its domain (e.g. soft targets for focal loss)."""


class BoxError(RetinaGANError, ValueError):
    """Degenerate or malformed bounding box."""


class PlacementError(RetinaGANError):
    """Scene sampler could not place the requested objects."""


class DatasetError(RetinaGANError):
    """Dataset directory, manifest or record is unusable."""

    def __init__(self, message: str, path: str = None, record_index: int = None):
        details = []
        if path is not None:
            details.append(f"path={path}")
        if record_index is not None:
            details.append(f"record={record_index}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")
        self.path = path
        self.record_index = record_index


class ConfigError(RetinaGANError, ValueError):
    """Configuration file or value is invalid."""


class CheckpointError(RetinaGANError):
    """Checkpoint file cannot be written or read."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the RGAN magic."""


class CheckpointVersionError(CheckpointError):
    """File was written by an unknown format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the header or a payload is complete."""


class CheckpointShapeTableError(CheckpointError):
    """Header shape table disagrees with itself or with the payload sizes."""


class FrozenModelError(RetinaGANError):
    """Attempt to update a frozen model."""


class TrainingError(RetinaGANError):
    """Training aborted; carries the step and the offending term."""

    def __init__(self, message: str, step: int = None, term: str = None):
        where = []
        if step is not None:
            where.append(f"step {step}")
        if term is not None:
            where.append(f"term '{term}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{message}")
        self.step = step
        self.term = term


class EvaluationError(RetinaGANError, ValueError):
    """Evaluation inputs are empty or misaligned."""
