"""Calibration quality metrics.

Brier score, its three-part decomposition (reliability, resolution,
uncertainty), loss due to confidence error (LCE) under a gain-1/loss-u cost
model, and high-confidence prediction counts.

The decomposition bins confidences into M intervals ((m-1)/M, m/M] (exact
zeros land in the first bin) and is computed on bin-mean confidences, for
which the identity

    brier_on_bin_means == reliability - resolution + uncertainty

holds exactly. The resolution term is weighted by |D_m|/N so that the
identity is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

DEFAULT_NUM_BINS = 10


@dataclass(frozen=True)
class CostModel:
    """Gain-1/loss-u decision costs with break-even confidence threshold."""

    loss_u: float
    threshold_lambda: float

    def __post_init__(self):
        if not (self.loss_u > 0.0 and np.isfinite(self.loss_u)):
            raise ValidationError(f"loss_u must be positive and finite, got {self.loss_u}")
        if not 0.0 < self.threshold_lambda < 1.0:
            raise ValidationError(f"threshold must lie in (0,1), got {self.threshold_lambda}")
        if abs(self.threshold_lambda - self.loss_u / (1.0 + self.loss_u)) > 1e-12:
            raise ValidationError("threshold_lambda inconsistent with loss_u / (1 + loss_u)")

    @classmethod
    def from_loss(cls, loss_u: float) -> "CostModel":
        if not (loss_u > 0.0 and np.isfinite(loss_u)):
            raise ValidationError(f"loss_u must be positive and finite, got {loss_u}")
        return cls(loss_u=loss_u, threshold_lambda=loss_u / (1.0 + loss_u))

    @classmethod
    def from_threshold(cls, threshold_lambda: float) -> "CostModel":
        if not 0.0 < threshold_lambda < 1.0:
            raise ValidationError(f"threshold must lie in (0,1), got {threshold_lambda}")
        return cls(loss_u=threshold_lambda / (1.0 - threshold_lambda),
                   threshold_lambda=threshold_lambda)


def _validate_pair(confidences, correctness) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(confidences, dtype=np.float64)
    i = np.asarray(correctness, dtype=np.float64)
    if c.ndim != 1 or i.ndim != 1 or c.shape != i.shape:
        raise ValidationError(f"confidences and correctness must be equal-length vectors, "
                              f"got shapes {c.shape} and {i.shape}")
    if c.shape[0] < 1:
        raise ValidationError("empty input")
    if np.any(~np.isfinite(c)) or np.any(c < 0.0) or np.any(c > 1.0):
        raise ValidationError("confidences must lie in [0, 1]")
    if np.any((i != 0.0) & (i != 1.0)):
        raise ValidationError("correctness must be 0/1")
    return c, i


def brier_score(confidences, correctness) -> float:
    """Mean squared error between confidence and the correctness indicator."""
    c, i = _validate_pair(confidences, correctness)
    return float(np.mean((i - c) ** 2))


def bin_index(confidences: np.ndarray, num_bins: int) -> np.ndarray:
    """Bin assignment for intervals ((m-1)/M, m/M]; confidence 0 goes to bin 0."""
    c = np.asarray(confidences, dtype=np.float64)
    idx = np.ceil(c * num_bins).astype(np.int64) - 1
    return np.clip(idx, 0, num_bins - 1)


def brier_decomposition(confidences, correctness, num_bins: int = DEFAULT_NUM_BINS,
                        ) -> tuple[float, float, float]:
    """Three-part Brier decomposition on bin-mean confidences.

    Returns (reliability, resolution, uncertainty). Verifies the exact
    identity against the Brier score of the bin-mean-substituted
    confidences before returning.
    """
    c, i = _validate_pair(confidences, correctness)
    if num_bins < 1:
        raise ValidationError(f"need at least one bin, got {num_bins}")
    n = c.shape[0]
    idx = bin_index(c, num_bins)
    acc = float(np.mean(i))
    reliability = 0.0
    resolution = 0.0
    binned = np.empty_like(c)
    for m in range(num_bins):
        mask = idx == m
        count = int(mask.sum())
        if count == 0:
            continue
        conf_m = float(np.mean(c[mask]))
        acc_m = float(np.mean(i[mask]))
        weight = count / n
        reliability += weight * (conf_m - acc_m) ** 2
        resolution += weight * (acc_m - acc) ** 2
        binned[mask] = conf_m
    uncertainty = acc * (1.0 - acc)
    identity_gap = abs(brier_score(binned, i) - (reliability - resolution + uncertainty))
    if identity_gap > 1e-9:
        raise NumericalError(f"decomposition identity violated by {identity_gap:.3e}")
    return reliability, resolution, uncertainty


def lce(confidences, correctness, cost: CostModel) -> float:
    """Average loss due to confidence error under the acting rule c >= threshold.

    Acting on a record yields gain 1 if correct, loss u otherwise; skipping
    yields 0. The result is the per-record gap between the perfect-confidence
    total gain and the realized gain.
    """
    c, i = _validate_pair(confidences, correctness)
    lam = cost.threshold_lambda
    acted = c >= lam
    gains = np.where(acted, i - cost.loss_u * (1.0 - i), 0.0)
    perfect = float(np.sum(i))
    return float((perfect - float(np.sum(gains))) / c.shape[0])


def high_confidence_counts(confidences, correctness, threshold: float) -> tuple[int, int]:
    """Counts of (correct, false) predictions with confidence >= threshold."""
    c, i = _validate_pair(confidences, correctness)
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must lie in (0, 1], got {threshold}")
    high = c >= threshold
    correct = int(np.sum(high & (i == 1.0)))
    false = int(np.sum(high & (i == 0.0)))
    return correct, false


@dataclass
class CalibrationReport:
    """Aggregate metrics for one confidence function on one labeled dataset."""

    brier: float
    reliability: float
    resolution: float
    uncertainty: float
    lce: float
    high_conf_correct: int
    high_conf_false: int
    num_bins: int
    threshold_lambda: float

    @classmethod
    def evaluate(cls, confidences, correctness, cost: CostModel,
                 num_bins: int = DEFAULT_NUM_BINS) -> "CalibrationReport":
        rel, res, unc = brier_decomposition(confidences, correctness, num_bins)
        hc_correct, hc_false = high_confidence_counts(
            confidences, correctness, cost.threshold_lambda)
        return cls(
            brier=brier_score(confidences, correctness),
            reliability=rel,
            resolution=res,
            uncertainty=unc,
            lce=lce(confidences, correctness, cost),
            high_conf_correct=hc_correct,
            high_conf_false=hc_false,
            num_bins=num_bins,
            threshold_lambda=cost.threshold_lambda,
        )

    _FIELDS = ("brier", "reliability", "resolution", "uncertainty", "lce",
               "high_conf_correct", "high_conf_false", "num_bins", "threshold_lambda")

    def to_text(self) -> str:
        return "\n".join(f"{name} = {getattr(self, name)!r}" for name in self._FIELDS) + "\n"

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls._FIELDS)

    def to_csv_row(self) -> str:
        return ",".join(repr(getattr(self, name)) for name in self._FIELDS)
