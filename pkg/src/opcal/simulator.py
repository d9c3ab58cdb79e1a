"""Synthetic domain-shift scenarios and labeling-budget sweeps.

A scenario draws per-class Gaussian features in an origin domain, fits the
closed-form Bayes linear-softmax classifier to an origin sample, then moves
every class mean by one shared shift vector and samples the operation
domain from the moved Gaussians. The classifier's logits on operation
points are systematically miscalibrated, which is the regime the
calibrators are compared in.

run_sweep reproduces the evaluation protocol: for each label budget the
active GP calibrator picks and labels records on the calibration split,
every baseline is fitted on exactly the same labeled records, and all
methods are scored on a held-out test split that no oracle ever sees.
Budget 0 is the uncalibrated model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .baselines import (
    apply_isotonic_batch,
    apply_platt_conf_batch,
    apply_platt_logit_batch,
    apply_temperature_batch,
    fit_isotonic,
    fit_platt_conf,
    fit_platt_logit,
    fit_temperature,
)
from .calibrator import LabelOracle, calibrate, calibrated_confidences, replay
from .clustering import default_cluster_count
from .dataset import Dataset, OperationRecord, format_float
from .errors import ValidationError
from .metrics import (
    DEFAULT_NUM_BINS,
    CostModel,
    brier_decomposition,
    brier_score,
    high_confidence_counts,
    lce,
)

GPR_NAME = "gpr"
SWEEP_CALIBRATORS = (GPR_NAME, "temperature", "platt_conf", "platt_logit", "isotonic")
HIGH_CONFIDENCE_THRESHOLDS = (0.8, 0.9)
DEFAULT_SWEEP_COST = 0.8

SWEEP_HEADER = ("budget,calibrator,brier,reliability,resolution,lce,"
                "hc_correct_08,hc_false_08,hc_correct_09,hc_false_09")


@dataclass(frozen=True)
class SyntheticScenario:
    """Configuration of one shifted-Gaussians task."""

    seed: int
    num_classes: int
    feature_dim: int
    origin_means: np.ndarray  # (K, D)
    operation_means: np.ndarray  # (K, D)
    shift_magnitude: float
    noise_scale: float
    num_operation: int
    calibration_fraction: float
    test_fraction: float

    def __post_init__(self):
        k, d = self.num_classes, self.feature_dim
        if k < 2:
            raise ValidationError(f"need at least 2 classes, got {k}")
        if self.origin_means.shape != (k, d) or self.operation_means.shape != (k, d):
            raise ValidationError("class mean matrices must be (num_classes, feature_dim)")
        if self.noise_scale <= 0.0:
            raise ValidationError(f"noise scale must be positive, got {self.noise_scale}")
        if self.num_operation < 2:
            raise ValidationError("need at least 2 operation records")
        if not 0.0 < self.calibration_fraction < 1.0 or not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("split fractions must lie strictly between 0 and 1")
        if abs(self.calibration_fraction + self.test_fraction - 1.0) > 1e-12:
            raise ValidationError("split fractions must sum to 1")
        shift = self.operation_means - self.origin_means
        if np.max(np.abs(shift - shift[0])) > 1e-9:
            raise ValidationError("every class must move by the same shift vector")
        norm = float(np.linalg.norm(shift[0]))
        if abs(norm - self.shift_magnitude) > 1e-9:
            raise ValidationError(
                f"shift vector norm {norm} != declared magnitude {self.shift_magnitude}")


def make_scenario(seed: int, num_classes: int = 3, feature_dim: int = 8,
                  shift_magnitude: float = 2.0, noise_scale: float = 1.0,
                  num_operation: int = 2000, calibration_fraction: float = 0.5,
                  mean_scale: float = 1.0) -> SyntheticScenario:
    """Draw class means and a shift direction for the given seed."""
    rng = np.random.default_rng(seed)
    origin_means = mean_scale * rng.normal(size=(num_classes, feature_dim))
    direction = rng.normal(size=feature_dim)
    direction /= np.linalg.norm(direction)
    shift = direction * shift_magnitude
    return SyntheticScenario(
        seed=seed, num_classes=num_classes, feature_dim=feature_dim,
        origin_means=origin_means, operation_means=origin_means + shift,
        shift_magnitude=shift_magnitude, noise_scale=noise_scale,
        num_operation=num_operation, calibration_fraction=calibration_fraction,
        test_fraction=1.0 - calibration_fraction)


REFERENCE_SEED = 20240605
REFERENCE_SHIFT = 6.2
REFERENCE_NOISE = 0.6
REFERENCE_MEAN_SCALE = 2.0


def reference_scenario() -> SyntheticScenario:
    """The committed evaluation task: 3 classes, 8 features, 2000 records.

    The shift magnitude is pinned so the uncalibrated test accuracy lands
    in the 55-70% band for the committed seed: well-separated classes
    whose shared displacement sends a large share of the operation data
    across the frozen decision boundaries while the model stays highly
    confident.
    """
    return make_scenario(seed=REFERENCE_SEED, num_classes=3, feature_dim=8,
                         shift_magnitude=REFERENCE_SHIFT,
                         noise_scale=REFERENCE_NOISE, num_operation=2000,
                         calibration_fraction=0.5,
                         mean_scale=REFERENCE_MEAN_SCALE)


@dataclass(frozen=True)
class LinearSoftmaxClassifier:
    """Bayes-optimal linear classifier for isotropic Gaussian classes.

    With shared covariance sigma^2 I and equal priors the posterior is a
    softmax over w_k = m_k / sigma^2, b_k = -||m_k||^2 / (2 sigma^2).
    """

    weights: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(features) @ self.weights + self.bias

    @classmethod
    def fit_bayes(cls, features: np.ndarray, labels: np.ndarray, num_classes: int,
                  noise_scale: float) -> "LinearSoftmaxClassifier":
        d = features.shape[1]
        weights = np.empty((d, num_classes))
        bias = np.empty(num_classes)
        variance = noise_scale ** 2
        for k in range(num_classes):
            members = features[labels == k]
            if members.shape[0] == 0:
                raise ValidationError(f"origin sample has no examples of class {k}")
            mean = np.mean(members, axis=0)
            weights[:, k] = mean / variance
            bias[k] = -float(mean @ mean) / (2.0 * variance)
        return cls(weights=weights, bias=bias)


class GuardedOracle:
    """Label oracle restricted to an allowed id set; counts its calls."""

    def __init__(self, truth: dict[int, int], allowed_ids, description: str):
        self.truth = dict(truth)
        self._allowed = set(allowed_ids)
        self._description = description
        self.calls = []

    def __call__(self, record_id: int) -> int:
        if record_id not in self._allowed:
            raise ValidationError(
                f"record {record_id} is outside the {self._description}; "
                f"refusing to label it")
        self.calls.append(record_id)
        return self.truth[record_id]


def forbid_ids(oracle: LabelOracle, forbidden, description: str) -> LabelOracle:
    """Wrap an oracle so requests for the forbidden ids raise instead."""
    blocked = frozenset(forbidden)

    def guarded(record_id: int) -> int:
        if record_id in blocked:
            raise ValidationError(
                f"record {record_id} belongs to the {description}; it must "
                f"never be labeled")
        return oracle(record_id)

    return guarded


@dataclass
class GeneratedScenario:
    """Sampled scenario: splits, the reference classifier, and hidden truth."""

    scenario: SyntheticScenario
    classifier: LinearSoftmaxClassifier
    calibration: Dataset
    test: Dataset
    origin_accuracy: float
    operation_accuracy: float
    _truth: dict[int, int]

    def oracle(self) -> GuardedOracle:
        """Oracle over the calibration split only; test ids are refused."""
        calibration_ids = [rec.id for rec in self.calibration.records]
        return GuardedOracle(self._truth, calibration_ids, "calibration split")

    def true_labels(self, dataset: Dataset) -> np.ndarray:
        return np.array([self._truth[rec.id] for rec in dataset.records],
                        dtype=np.int64)


DEFAULT_ORIGIN_SAMPLE = 200


def generate_scenario(scenario: SyntheticScenario,
                      origin_sample_size: int = DEFAULT_ORIGIN_SAMPLE,
                      ) -> GeneratedScenario:
    """Sample the origin fit and the operation splits, deterministically.

    The reference classifier is fitted on a modest origin sample on
    purpose: its estimated class means carry sampling error, like any
    model trained on finite data, so its logits are an imperfect summary
    of the features.
    """
    rng = np.random.default_rng(scenario.seed)
    k, d, n = scenario.num_classes, scenario.feature_dim, scenario.num_operation
    if origin_sample_size < 2 * k:
        raise ValidationError(
            f"origin sample of {origin_sample_size} cannot cover {k} classes")

    origin_labels = rng.integers(k, size=origin_sample_size)
    origin_features = (scenario.origin_means[origin_labels]
                       + scenario.noise_scale
                       * rng.normal(size=(origin_sample_size, d)))
    classifier = LinearSoftmaxClassifier.fit_bayes(
        origin_features, origin_labels, k, scenario.noise_scale)
    holdout_labels = rng.integers(k, size=n)
    holdout_features = (scenario.origin_means[holdout_labels]
                        + scenario.noise_scale * rng.normal(size=(n, d)))
    origin_predicted = np.argmax(classifier.logits(holdout_features), axis=1)
    origin_accuracy = float(np.mean(origin_predicted == holdout_labels))

    operation_labels = rng.integers(k, size=n)
    operation_features = (scenario.operation_means[operation_labels]
                          + scenario.noise_scale * rng.normal(size=(n, d)))
    logits = classifier.logits(operation_features)
    operation_accuracy = float(np.mean(np.argmax(logits, axis=1) == operation_labels))

    records = [OperationRecord(id=i, representation=operation_features[i],
                               logits=logits[i]) for i in range(n)]
    truth = {i: int(operation_labels[i]) for i in range(n)}
    split = int(round(n * scenario.calibration_fraction))
    if split < 1 or split >= n:
        raise ValidationError(f"degenerate split at {split} of {n} records")
    return GeneratedScenario(
        scenario=scenario, classifier=classifier,
        calibration=Dataset.from_records(records[:split]),
        test=Dataset.from_records(records[split:]),
        origin_accuracy=origin_accuracy, operation_accuracy=operation_accuracy,
        _truth=truth)


@dataclass(frozen=True)
class SweepRow:
    budget: int
    calibrator: str
    brier: float
    reliability: float
    resolution: float
    lce: float
    hc_correct_08: float
    hc_false_08: float
    hc_correct_09: float
    hc_false_09: float


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def row(self, budget: int, calibrator: str) -> SweepRow:
        for r in self.rows:
            if r.budget == budget and r.calibrator == calibrator:
                return r
        raise ValidationError(f"no sweep row for budget {budget}, {calibrator}")


def _metric_row(budget: int, name: str, confidences: np.ndarray,
                correctness: np.ndarray, cost: CostModel, num_bins: int) -> SweepRow:
    reliability, resolution, _ = brier_decomposition(confidences, correctness, num_bins)
    hc08 = high_confidence_counts(confidences, correctness, 0.8)
    hc09 = high_confidence_counts(confidences, correctness, 0.9)
    return SweepRow(
        budget=budget, calibrator=name,
        brier=brier_score(confidences, correctness),
        reliability=reliability, resolution=resolution,
        lce=lce(confidences, correctness, cost),
        hc_correct_08=float(hc08[0]), hc_false_08=float(hc08[1]),
        hc_correct_09=float(hc09[0]), hc_false_09=float(hc09[1]))


def _with_labels(dataset: Dataset, labels: dict[int, int]) -> Dataset:
    records = [OperationRecord(id=rec.id, representation=rec.representation,
                               logits=rec.logits, label=labels.get(rec.id))
               for rec in dataset.records]
    return Dataset.from_records(records)


def run_sweep(calibration: Dataset, test: Dataset, oracle: LabelOracle,
              test_labels: np.ndarray, budgets: Sequence[int],
              calibrators: Sequence[str] = SWEEP_CALIBRATORS,
              cost: Optional[CostModel] = None,
              num_clusters: Optional[int] = None, seed: int = 0,
              num_bins: int = DEFAULT_NUM_BINS) -> SweepResult:
    """Budget sweep with shared label sets across calibrators.

    The GP calibrator runs once at the largest budget; its label trace
    prefixes define the exact label set every method gets at each budget.
    The test split is evaluation-only: any oracle call for a test id is an
    error.
    """
    budgets = [int(b) for b in budgets]
    if not budgets or any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValidationError("budgets must be non-empty and strictly increasing")
    if budgets[0] < 0:
        raise ValidationError("budgets must be non-negative")
    if budgets[-1] > len(calibration.records):
        raise ValidationError(
            f"budget {budgets[-1]} exceeds calibration split size "
            f"{len(calibration.records)}")
    if not calibrators or len(set(calibrators)) != len(calibrators):
        raise ValidationError("calibrators must be non-empty and unique")
    unknown = [c for c in calibrators if c not in SWEEP_CALIBRATORS]
    if unknown:
        raise ValidationError(
            f"unknown calibrators {unknown}; valid: {list(SWEEP_CALIBRATORS)}")
    calibration_ids = {rec.id for rec in calibration.records}
    test_ids = {rec.id for rec in test.records}
    if calibration_ids & test_ids:
        raise ValidationError("calibration and test splits share record ids")
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if test_labels.shape != (len(test.records),):
        raise ValidationError("need one true label per test record")
    if np.any(test_labels < 0) or np.any(test_labels >= test.num_classes):
        raise ValidationError("test labels outside class range")

    guarded = forbid_ids(oracle, test_ids, "test split")

    if cost is None:
        cost = CostModel.from_threshold(DEFAULT_SWEEP_COST)
    if num_clusters is None:
        num_clusters = default_cluster_count(len(calibration.records))
    positive = [b for b in budgets if b > 0]
    if positive and positive[0] < num_clusters:
        raise ValidationError(
            f"smallest positive budget {positive[0]} cannot cover "
            f"{num_clusters} medoid labels")

    label_pairs: list[tuple[int, int]] = []
    if positive:
        full = calibrate(calibration, budget=max(budgets), oracle=guarded,
                         num_clusters=num_clusters, cost=cost, seed=seed)
        label_pairs = full.labeled_pairs()

    original_correctness = (test_labels == test.predicted_classes).astype(np.float64)
    rows = []
    for budget in budgets:
        if budget == 0:
            base = _metric_row(0, "", test.confidences, original_correctness,
                               cost, num_bins)
            for name in calibrators:
                rows.append(replace(base, calibrator=name))
            continue
        prefix = label_pairs[:budget]
        labeled = _with_labels(calibration, dict(prefix))
        for name in calibrators:
            if name == GPR_NAME:
                state = replay(calibration, num_clusters, cost, seed, prefix,
                               budget=budget)
                confidences = calibrated_confidences(state, test)
            elif name == "temperature":
                confidences = apply_temperature_batch(fit_temperature(labeled), test)
            elif name == "platt_conf":
                confidences = apply_platt_conf_batch(fit_platt_conf(labeled), test)
            elif name == "platt_logit":
                confidences = apply_platt_logit_batch(fit_platt_logit(labeled), test)
            else:
                confidences = apply_isotonic_batch(fit_isotonic(labeled), test)
            rows.append(_metric_row(budget, name, confidences,
                                    original_correctness, cost, num_bins))
    return SweepResult(rows=rows)


def sweep_scenario(scenario: SyntheticScenario, budgets: Sequence[int],
                   calibrators: Sequence[str] = SWEEP_CALIBRATORS,
                   cost: Optional[CostModel] = None,
                   num_clusters: Optional[int] = None,
                   num_bins: int = DEFAULT_NUM_BINS) -> SweepResult:
    """Generate the scenario and sweep it with its own guarded oracle."""
    generated = generate_scenario(scenario)
    return run_sweep(generated.calibration, generated.test, generated.oracle(),
                     generated.true_labels(generated.test), budgets, calibrators,
                     cost=cost, num_clusters=num_clusters, seed=scenario.seed,
                     num_bins=num_bins)


def averaged_sweep(scenario: SyntheticScenario, budgets: Sequence[int],
                   calibrators: Sequence[str] = SWEEP_CALIBRATORS,
                   cost: Optional[CostModel] = None, repeats: int = 1,
                   num_clusters: Optional[int] = None,
                   num_bins: int = DEFAULT_NUM_BINS) -> SweepResult:
    """Mean metrics over `repeats` resamplings of the same scenario task.

    Repeat r shifts only the sampling seed; class means and the shift stay
    fixed, matching repeated experiments on one task.
    """
    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    results = []
    for r in range(repeats):
        variant = replace(scenario, seed=scenario.seed + r)
        results.append(sweep_scenario(variant, budgets, calibrators, cost=cost,
                                      num_clusters=num_clusters, num_bins=num_bins))
    rows = []
    for i, first in enumerate(results[0].rows):
        stack = [res.rows[i] for res in results]
        assert all((r.budget, r.calibrator) == (first.budget, first.calibrator)
                   for r in stack)
        rows.append(SweepRow(
            budget=first.budget, calibrator=first.calibrator,
            brier=float(np.mean([r.brier for r in stack])),
            reliability=float(np.mean([r.reliability for r in stack])),
            resolution=float(np.mean([r.resolution for r in stack])),
            lce=float(np.mean([r.lce for r in stack])),
            hc_correct_08=float(np.mean([r.hc_correct_08 for r in stack])),
            hc_false_08=float(np.mean([r.hc_false_08 for r in stack])),
            hc_correct_09=float(np.mean([r.hc_correct_09 for r in stack])),
            hc_false_09=float(np.mean([r.hc_false_09 for r in stack]))))
    return SweepResult(rows=rows)


def _format_count(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else format_float(value)


def write_sweep(path, result: SweepResult) -> None:
    lines = [SWEEP_HEADER]
    for r in result.rows:
        lines.append(",".join([
            str(r.budget), r.calibrator,
            format_float(r.brier), format_float(r.reliability),
            format_float(r.resolution), format_float(r.lce),
            _format_count(r.hc_correct_08), _format_count(r.hc_false_08),
            _format_count(r.hc_correct_09), _format_count(r.hc_false_09)]))
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")
