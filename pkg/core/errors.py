"""Exception hierarchy shared by every package."""

from __future__ import annotations


class TransProError(Exception):
    """Base class for all domain errors raised by this project."""


class ConfigError(TransProError, ValueError):
    """Configuration file or override is invalid (unknown key, negative weight, missing path)."""


class VolumeFormatError(TransProError, ValueError):
    """Raw tensor file and its sidecar disagree, or the sidecar is missing or malformed."""


class RangeViolationError(TransProError, ValueError):
    """Stored intensities fall outside [0, 1]."""


class ShapeError(TransProError, ValueError):
    """Tensor shapes mismatch or violate a divisibility constraint."""


class MaskSourceError(TransProError, ValueError):
    """A vessel mask of the wrong provenance was handed to an operation."""


class EmptySetError(TransProError, ValueError):
    """An aggregate was requested over an empty collection."""


class PhantomRetryError(TransProError, RuntimeError):
    """Phantom generation could not meet the density band within its retry budget."""


class NonFiniteLossError(TransProError, RuntimeError):
    """A training or probe loss became NaN or infinite."""


class CheckpointError(TransProError, RuntimeError):
    """A checkpoint is missing, incomplete, or does not match the requested role."""


class GuidanceMismatchError(CheckpointError):
    """A frozen guidance checkpoint is incompatible with the dataset geometry."""


class UsageError(TransProError, ValueError):
    """Unknown command, unknown flag or a malformed flag value on the command line."""
