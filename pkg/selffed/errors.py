"""
Exception hierarchy for selffed.

Every failure the simulator can report has its own class so callers can
catch precisely. Each class also derives from the closest builtin, so code
written against ValueError / RuntimeError keeps working.
"""

from typing import Optional


class SelfFedError(Exception):
    """Root of all selffed errors."""


# -- numerics ---------------------------------------------------------------

class ShapeMismatchError(SelfFedError, ValueError):
    """Operands do not conform to an op's shape rule."""


class NonFiniteError(SelfFedError, ArithmeticError):
    """An op produced NaN or Inf. The step is aborted."""

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"Non-finite value produced by op '{op}'")


class NotScalarLossError(SelfFedError, ValueError):
    """backward() was asked to differentiate a non-scalar tensor."""


class GraphNotEvaluatedError(SelfFedError, RuntimeError):
    """backward() was called for a tensor the graph never produced."""


class MissingGradientError(SelfFedError, KeyError):
    """An optimizer step lacks a gradient for a trainable tensor."""


class NormalizationError(SelfFedError, ArithmeticError):
    """L2 normalization of a zero vector."""


class SerializationError(SelfFedError, ValueError):
    """A weights container is malformed."""


# -- images and patches -----------------------------------------------------

class IndivisibleImageError(SelfFedError, ValueError):
    """Patch side does not divide the image extents."""


class CountMismatchError(SelfFedError, ValueError):
    """Patch count does not match the grid."""


class CropTooLargeError(SelfFedError, ValueError):
    """Requested crop exceeds the source image."""


# -- losses -----------------------------------------------------------------

class EmptyMaskSetError(SelfFedError, ValueError):
    """Masked reconstruction loss with no masked patch."""


class EmptyQueueError(SelfFedError, ValueError):
    """InfoNCE with no negatives in the memory queue."""


class ZeroTemperatureError(SelfFedError, ValueError):
    """Temperature must be strictly positive."""


class NonUnitNormError(SelfFedError, ValueError):
    """Memory queue only stores unit-norm embeddings."""


class LabelOutOfRangeError(SelfFedError, ValueError):
    """A class label is not below the class count."""


# -- protocol ---------------------------------------------------------------

class EmptyBatchError(SelfFedError, ValueError):
    """A training step received no samples."""


class EmptyShardError(SelfFedError, ValueError):
    """A client has no unlabeled samples to pre-train on."""


class EmptyLabeledShardError(SelfFedError, ValueError):
    """A client has no labeled samples to fine-tune on."""


class EmptyUpdateSetError(SelfFedError, ValueError):
    """Aggregation over zero client updates."""


class BetaOutOfRangeError(SelfFedError, ValueError):
    """Frequency decay beta must lie in (0, 1]."""


# -- data -------------------------------------------------------------------

class TooFewSamplesError(SelfFedError, ValueError):
    """A class has no samples to partition."""


class FractionOutOfRangeError(SelfFedError, ValueError):
    """Label fraction must lie in (0, 1]."""


class UnreadableImageError(SelfFedError, OSError):
    """An image file could not be parsed."""


class SizeMismatchError(SelfFedError, ValueError):
    """An ingested image does not match the configured extents."""


class UnknownLabelError(SelfFedError, KeyError):
    """A manifest names a label outside the configured classes."""


# -- harness ----------------------------------------------------------------

class ParseError(SelfFedError, ValueError):
    """A config file could not be parsed."""


class ValidationError(SelfFedError, ValueError):
    """A config value is invalid. `field` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IncompatibleRunsError(SelfFedError, ValueError):
    """Run summaries cannot be compared."""
