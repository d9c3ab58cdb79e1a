"""Gaussian Process regression on the confidence-correction signal.

The GP models h(z) = I(z) - c_M(z), the gap between the correctness
indicator and the model's original confidence, as a zero-mean process with
an RBF kernel over representation space:

    k(z1, z2) = exp(-||z1 - z2||^2 / (2 ell^2))

Posterior at a query point z*:

    mu     = k(z*, X) (K_XX + jitter I)^{-1} h
    sigma2 = k(z*, z*) - k(z*, X) (K_XX + jitter I)^{-1} k(X, z*)

The calibrated confidence is then the mean of the normal N(c_M + mu, sigma)
truncated to [0, 1]; truncated_moments computes that mean and standard
deviation with standardized truncation bounds alpha, beta.

Observations are treated as noise-free; jitter exists only to keep the
Cholesky factorization positive definite and escalates x10 on failure up
to 1e-2 before giving up.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erfc

from .errors import NumericalError, ValidationError

DEFAULT_JITTER = 1e-8
MAX_JITTER = 1e-2
DEGENERATE_SIGMA = 1e-12
MEDIAN_HEURISTIC_MAX_POINTS = 500

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT_2 = math.sqrt(2.0)


def rbf(z1: np.ndarray, z2: np.ndarray, length_scale: float) -> float:
    """RBF kernel value exp(-||z1 - z2||^2 / (2 ell^2))."""
    if length_scale <= 0.0:
        raise ValidationError(f"length scale must be positive, got {length_scale}")
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValidationError(f"dimension mismatch: {z1.shape} vs {z2.shape}")
    sq = float(np.sum((z1 - z2) ** 2))
    return math.exp(-sq / (2.0 * length_scale ** 2))


@dataclass(frozen=True)
class RbfKernel:
    length_scale: float

    def __post_init__(self):
        if not (self.length_scale > 0.0 and np.isfinite(self.length_scale)):
            raise ValidationError(f"length scale must be positive, got {self.length_scale}")

    def __call__(self, z1: np.ndarray, z2: np.ndarray) -> float:
        return rbf(z1, z2, self.length_scale)

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Kernel matrix between the rows of a (n, D) and b (m, D)."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        sq = (np.sum(a ** 2, axis=1)[:, None] + np.sum(b ** 2, axis=1)[None, :]
              - 2.0 * (a @ b.T))
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-sq / (2.0 * self.length_scale ** 2))

    def gram(self, a: np.ndarray) -> np.ndarray:
        """Kernel matrix of a against itself, with an exact unit diagonal."""
        k = self.matrix(a, a)
        np.fill_diagonal(k, 1.0)
        return k


def median_heuristic_length_scale(points: np.ndarray) -> float:
    """Median pairwise distance among up to 500 stride-subsampled points.

    Falls back to 1.0 (with a warning) when fewer than 2 points are given or
    all points coincide.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n < 2:
        warnings.warn("median heuristic needs >= 2 points; falling back to length scale 1.0",
                      stacklevel=2)
        return 1.0
    if n > MEDIAN_HEURISTIC_MAX_POINTS:
        stride = math.ceil(n / MEDIAN_HEURISTIC_MAX_POINTS)
        points = points[::stride]
        n = points.shape[0]
    sq = (np.sum(points ** 2, axis=1)[:, None] + np.sum(points ** 2, axis=1)[None, :]
          - 2.0 * (points @ points.T))
    np.maximum(sq, 0.0, out=sq)
    iu = np.triu_indices(n, k=1)
    median = float(np.median(np.sqrt(sq[iu])))
    if median == 0.0:
        warnings.warn("all points coincide; falling back to length scale 1.0", stacklevel=2)
        return 1.0
    return median


@dataclass
class GpModel:
    """Fitted GP: training data, kernel, and the Cholesky factor it implies."""

    training_points: np.ndarray
    training_targets: np.ndarray
    kernel: RbfKernel
    cholesky_factor: np.ndarray
    jitter: float
    _alpha: np.ndarray  # (K + jitter I)^{-1} h, precomputed through the factor

    def __len__(self) -> int:
        return self.training_points.shape[0]


def fit(points: np.ndarray, targets: np.ndarray, kernel: RbfKernel,
        jitter: float = DEFAULT_JITTER) -> GpModel:
    """Factorize K_XX + jitter I and precompute the weight vector.

    Refitting with an appended observation is a full refactorization, so it
    produces exactly the posterior of a from-scratch fit.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if points.shape[0] != targets.shape[0] or targets.shape[0] < 1:
        raise ValidationError(
            f"need equally many points and targets (>= 1), got {points.shape[0]} and {targets.shape[0]}")
    if np.any(~np.isfinite(points)) or np.any(~np.isfinite(targets)):
        raise ValidationError("non-finite training data")
    if np.any(np.abs(targets) > 1.0 + 1e-12):
        raise ValidationError("targets must lie in [-1, 1]")
    if not 0.0 < jitter <= MAX_JITTER:
        raise ValidationError(f"jitter must lie in (0, {MAX_JITTER}], got {jitter}")

    gram = kernel.gram(points)
    current = jitter
    while True:
        try:
            factor = np.linalg.cholesky(gram + current * np.eye(points.shape[0]))
            break
        except np.linalg.LinAlgError:
            current *= 10.0
            if current > MAX_JITTER:
                raise NumericalError(
                    f"kernel matrix not positive definite even with jitter {MAX_JITTER}; "
                    f"training points are too degenerate") from None
    alpha = solve_triangular(factor, targets, lower=True)
    alpha = solve_triangular(factor.T, alpha, lower=False)
    return GpModel(training_points=points, training_targets=targets, kernel=kernel,
                   cholesky_factor=factor, jitter=current, _alpha=alpha)


def posterior_batch(model: GpModel, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation at each query row."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != model.training_points.shape[1]:
        raise ValidationError(
            f"query dimension {queries.shape[1]} != training dimension "
            f"{model.training_points.shape[1]}")
    k_star = model.kernel.matrix(model.training_points, queries)  # (n, m)
    mean = k_star.T @ model._alpha
    v = solve_triangular(model.cholesky_factor, k_star, lower=True)
    var = 1.0 - np.sum(v ** 2, axis=0)
    np.maximum(var, 0.0, out=var)
    return mean, np.sqrt(var)


def posterior(model: GpModel, query: np.ndarray) -> tuple[float, float]:
    """Posterior (mean, std) at a single query point."""
    mean, std = posterior_batch(model, np.asarray(query, dtype=np.float64)[None, :])
    return float(mean[0]), float(std[0])


def standard_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x ** 2) / _SQRT_2PI


def standard_normal_cdf(x):
    """Phi via erfc; absolute error well below 1e-12 over the real line."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * erfc(-x / _SQRT_2)


@dataclass
class ConfidencePosterior:
    """Truncated-normal confidence posterior for one input.

    `mean` is the calibrated confidence; alpha and beta are the truncation
    bounds of [0, 1] in standardized units of the untruncated normal.
    """

    mean: float
    std: float
    alpha: float
    beta: float
    gp_mean: float
    gp_std: float
    base_confidence: float
    degenerate: bool = False


def truncated_moments_arrays(base_confidence: np.ndarray, gp_mean: np.ndarray,
                             gp_std: np.ndarray) -> tuple[np.ndarray, ...]:
    """Vectorized truncated-normal moments; see truncated_moments.

    Returns (mean, std, alpha, beta, degenerate) arrays.
    """
    c = np.asarray(base_confidence, dtype=np.float64)
    mu = np.asarray(gp_mean, dtype=np.float64)
    sigma = np.asarray(gp_std, dtype=np.float64)
    c, mu, sigma = np.broadcast_arrays(c, mu, sigma)

    center = c + mu
    mean = np.clip(center, 0.0, 1.0)
    std = np.zeros_like(mean)
    alpha = np.zeros_like(mean)
    beta = np.zeros_like(mean)
    degenerate = np.zeros(mean.shape, dtype=bool)

    active = sigma > DEGENERATE_SIGMA
    if np.any(active):
        a = (0.0 - center[active]) / sigma[active]
        b = (1.0 - center[active]) / sigma[active]
        alpha[active] = a
        beta[active] = b
        # Difference of CDFs through the smaller tail to avoid cancellation.
        mass = np.where(
            a > 0.0,
            0.5 * (erfc(a / _SQRT_2) - erfc(b / _SQRT_2)),
            0.5 * (erfc(-b / _SQRT_2) - erfc(-a / _SQRT_2)),
        )
        vanished = mass < 1e-300
        ok = ~vanished
        if np.any(ok):
            a_ok, b_ok, z = a[ok], b[ok], mass[ok]
            pdf_a, pdf_b = standard_normal_pdf(a_ok), standard_normal_pdf(b_ok)
            sig = sigma[active][ok]
            ctr = center[active][ok]
            pdf_gap = (pdf_a - pdf_b) / z
            m = ctr + sig * pdf_gap
            var_factor = 1.0 + (a_ok * pdf_a - b_ok * pdf_b) / z - pdf_gap ** 2
            var = sig ** 2 * np.clip(var_factor, 0.0, 1.0)
            idx_active = np.flatnonzero(active)
            idx = idx_active[ok]
            mean.flat[idx] = np.clip(m, 0.0, 1.0)
            std.flat[idx] = np.minimum(np.sqrt(var), sig)
        if np.any(vanished):
            # All mass outside [0, 1]: collapse onto the nearer bound.
            idx = np.flatnonzero(active)[vanished]
            mean.flat[idx] = (center.flat[idx] >= 0.5).astype(np.float64)
            std.flat[idx] = 0.0
            degenerate.flat[idx] = True

    return mean, std, alpha, beta, degenerate


def truncated_moments(base_confidence: float, gp_mean: float, gp_std: float,
                      ) -> ConfidencePosterior:
    """Moments of N(c_M + mu, sigma^2) truncated to [0, 1].

    With sigma at or below 1e-12 the normal collapses to its center clamped
    into [0, 1]. When the truncation keeps less than 1e-300 of the mass,
    the posterior collapses onto the nearer bound and is flagged degenerate.
    """
    if not 0.0 <= base_confidence <= 1.0:
        raise ValidationError(f"base confidence must lie in [0, 1], got {base_confidence}")
    if gp_std < 0.0 or not np.isfinite(gp_std):
        raise ValidationError(f"sigma must be finite and >= 0, got {gp_std}")
    if not np.isfinite(gp_mean):
        raise ValidationError(f"mu must be finite, got {gp_mean}")
    mean, std, alpha, beta, degenerate = truncated_moments_arrays(
        np.array([base_confidence]), np.array([gp_mean]), np.array([gp_std]))
    return ConfidencePosterior(
        mean=float(mean[0]), std=float(std[0]),
        alpha=float(alpha[0]), beta=float(beta[0]),
        gp_mean=float(gp_mean), gp_std=float(gp_std),
        base_confidence=float(base_confidence),
        degenerate=bool(degenerate[0]),
    )
