"""Feature and logit extraction from PyTorch classifiers.

Hooks a model's final linear layer and writes the calibration toolkit's
dataset CSV: one row per input with the model's logits and the hooked
layer's input as the feature vector, plus a one-line JSON metadata sidecar.
"""

from .extraction import (
    CONSISTENCY_TOLERANCE,
    UNLABELED,
    ExtractionConfig,
    ExtractionError,
    ExtractionResult,
    extract,
    find_final_linear,
)

__all__ = [
    "CONSISTENCY_TOLERANCE",
    "UNLABELED",
    "ExtractionConfig",
    "ExtractionError",
    "ExtractionResult",
    "extract",
    "find_final_linear",
]

__version__ = "0.1.0"
