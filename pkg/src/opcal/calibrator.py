"""Active confidence calibration: cluster, label, refine, predict.

The workflow splits the operation data into clusters, labels each cluster's
medoid, and fits one GP per cluster on the correction signal I - c_M of its
labeled members. The remaining label budget is spent one query at a time on
the unlabeled record that minimizes |mu_tn - lambda| / sigma_tn, i.e. the
point whose calibrated confidence is least certain relative to the acting
threshold. The calibrated confidence of any record is the truncated-normal
posterior mean mu_tn from its cluster's GP. Predictions are never altered,
only confidences.

Labels come from an oracle callable mapping record id -> true class index,
so the same machinery runs against a file-backed label column, a synthetic
generator, or a human-in-the-loop shim. The input dataset is never mutated.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .clustering import default_cluster_count, k_medoids
from .dataset import Dataset, OperationRecord, derive_outputs, format_float
from .errors import ValidationError
from .gp import (
    ConfidencePosterior,
    GpModel,
    RbfKernel,
    fit,
    median_heuristic_length_scale,
    posterior_batch,
    truncated_moments,
    truncated_moments_arrays,
)
from .metrics import CostModel

LabelOracle = Callable[[int], int]

DEGENERATE_SIGMA = 1e-12
THRESHOLD_HIT = 1e-12
DEFAULT_SELECTION_THRESHOLD = 0.5

TRACE_HEADER = "step,record_id,cluster,mu_tn_before,sigma_tn_before,assigned_label"


@dataclass
class ClusterModel:
    """One cluster's labeled set and the GP fitted on it."""

    cluster_index: int
    member_ids: tuple[int, ...]
    medoid_id: int
    medoid_representation: np.ndarray
    kernel: RbfKernel
    gp: GpModel
    labeled_ids: list[int]

    def is_labeled(self, record_id: int) -> bool:
        return record_id in self._labeled_set

    def __post_init__(self):
        self._labeled_set = set(self.labeled_ids)

    def add_observation(self, record_id: int, representation: np.ndarray,
                        target: float) -> None:
        """Append one labeled member and refit the GP from scratch."""
        points = np.vstack([self.gp.training_points, representation[None, :]])
        targets = np.append(self.gp.training_targets, target)
        self.gp = fit(points, targets, self.kernel)
        self.labeled_ids.append(record_id)
        self._labeled_set.add(record_id)


@dataclass
class TraceEntry:
    """One labeling event: posterior state just before the label arrived."""

    step: int
    record_id: int
    cluster: int
    mu_tn_before: float
    sigma_tn_before: float
    assigned_label: int


@dataclass
class CalibratorState:
    clusters: list[ClusterModel]
    budget: int
    labels_used: int
    cost: Optional[CostModel]
    seed: int
    # Calibration-set bookkeeping: ids, representations, and cluster index
    # per record, used to route queries back to their cluster.
    record_ids: np.ndarray
    record_representations: np.ndarray
    record_clusters: np.ndarray
    trace: list[TraceEntry] = field(default_factory=list)

    def __post_init__(self):
        self._row_of = {int(rid): i for i, rid in enumerate(self.record_ids)}

    @property
    def selection_threshold(self) -> float:
        if self.cost is None:
            return DEFAULT_SELECTION_THRESHOLD
        return self.cost.threshold_lambda

    @property
    def medoid_matrix(self) -> np.ndarray:
        return np.vstack([c.medoid_representation for c in self.clusters])

    def cluster_index_of(self, record_id: int) -> Optional[int]:
        row = self._row_of.get(record_id)
        return None if row is None else int(self.record_clusters[row])

    def is_calibration_record(self, record: OperationRecord) -> bool:
        """True iff this exact record (id and representation) was calibrated on."""
        row = self._row_of.get(record.id)
        return row is not None and np.array_equal(
            self.record_representations[row], record.representation)

    def labeled_pairs(self) -> list[tuple[int, int]]:
        """(record_id, assigned_label) in labeling order."""
        return [(entry.record_id, entry.assigned_label) for entry in self.trace]


def selection_scores(mu_tn: np.ndarray, sigma_tn: np.ndarray,
                     threshold: float) -> np.ndarray:
    """Score |mu_tn - threshold| / sigma_tn; lower is more informative.

    Degenerate posteriors (sigma_tn <= 1e-12) score +inf, except exact hits
    on the threshold (|mu_tn - threshold| <= 1e-12) which score 0.
    """
    mu_tn = np.asarray(mu_tn, dtype=np.float64)
    sigma_tn = np.asarray(sigma_tn, dtype=np.float64)
    gap = np.abs(mu_tn - threshold)
    degenerate = sigma_tn <= DEGENERATE_SIGMA
    safe = np.where(degenerate, 1.0, sigma_tn)
    ratio = gap / safe
    return np.where(degenerate, np.where(gap <= THRESHOLD_HIT, 0.0, np.inf), ratio)


def _oracle_label(oracle: LabelOracle, record_id: int, num_classes: int) -> int:
    label = oracle(record_id)
    if not isinstance(label, (int, np.integer)) or isinstance(label, bool):
        raise ValidationError(f"oracle returned non-integer label {label!r} for id {record_id}")
    label = int(label)
    if not 0 <= label < num_classes:
        raise ValidationError(
            f"oracle label {label} for id {record_id} outside [0, {num_classes})")
    return label


def _correction_target(dataset: Dataset, record_id: int, label: int) -> float:
    idx = dataset.index_of(record_id)
    out = dataset.outputs[idx]
    indicator = 1.0 if label == out.predicted_class else 0.0
    return indicator - out.original_confidence


def initialize(dataset: Dataset, num_clusters: int, budget: int,
               cost: Optional[CostModel], seed: int,
               oracle: LabelOracle) -> CalibratorState:
    """Cluster the records, label every medoid, and fit 1-point GPs."""
    if num_clusters < 1:
        raise ValidationError(f"need at least one cluster, got {num_clusters}")
    if budget < num_clusters:
        raise ValidationError(
            f"budget {budget} cannot cover one label per medoid ({num_clusters} clusters)")
    reps = dataset.representations
    clustering = k_medoids(reps, num_clusters, seed=seed)

    state = CalibratorState(clusters=[], budget=budget, labels_used=0,
                            cost=cost, seed=seed, record_ids=dataset.ids.copy(),
                            record_representations=reps.copy(),
                            record_clusters=clustering.assignments.copy())

    for cluster_index in range(num_clusters):
        member_rows = clustering.members(cluster_index)
        member_ids = tuple(dataset.records[i].id for i in member_rows)
        medoid_row = int(clustering.medoids[cluster_index])
        medoid_id = dataset.records[medoid_row].id
        length_scale = median_heuristic_length_scale(reps[member_rows])
        kernel = RbfKernel(length_scale=length_scale)

        confidence = dataset.outputs[medoid_row].original_confidence
        prior = truncated_moments(confidence, 0.0, 1.0)
        label = _oracle_label(oracle, medoid_id, dataset.num_classes)
        target = _correction_target(dataset, medoid_id, label)
        gp = fit(reps[medoid_row][None, :], np.array([target]), kernel)
        state.clusters.append(ClusterModel(
            cluster_index=cluster_index, member_ids=member_ids,
            medoid_id=medoid_id, medoid_representation=reps[medoid_row].copy(),
            kernel=kernel, gp=gp, labeled_ids=[medoid_id]))
        state.labels_used += 1
        state.trace.append(TraceEntry(
            step=state.labels_used, record_id=medoid_id, cluster=cluster_index,
            mu_tn_before=prior.mean, sigma_tn_before=prior.std,
            assigned_label=label))
    return state


def _candidate_posteriors(state: CalibratorState, dataset: Dataset,
                          cluster: ClusterModel) -> Optional[tuple[np.ndarray, ...]]:
    """Truncated posterior (ids, mu_tn, sigma_tn) of the unlabeled members."""
    candidate_ids = [i for i in cluster.member_ids if not cluster.is_labeled(i)]
    if not candidate_ids:
        return None
    rows = np.array([dataset.index_of(i) for i in candidate_ids])
    mu, sigma = posterior_batch(cluster.gp, dataset.representations[rows])
    confidences = dataset.confidences[rows]
    mean, std, _, _, _ = truncated_moments_arrays(confidences, mu, sigma)
    return np.asarray(candidate_ids), mean, std


def _select(state: CalibratorState, dataset: Dataset) -> tuple[int, int, float, float]:
    if state.labels_used >= state.budget:
        raise ValidationError("label budget exhausted")
    threshold = state.selection_threshold
    best = None
    for cluster in state.clusters:
        candidates = _candidate_posteriors(state, dataset, cluster)
        if candidates is None:
            continue
        ids, mean, std = candidates
        scores = selection_scores(mean, std, threshold)
        i = int(np.lexsort((ids, scores))[0])
        entry = (float(scores[i]), int(ids[i]), cluster.cluster_index,
                 float(mean[i]), float(std[i]))
        if best is None or entry[:2] < best[:2]:
            best = entry
    if best is None:
        raise ValidationError("no unlabeled records remain")
    _, record_id, cluster_index, mu_tn, sigma_tn = best
    return record_id, cluster_index, mu_tn, sigma_tn


def select_next(state: CalibratorState, dataset: Dataset) -> int:
    """Id of the unlabeled record minimizing |mu_tn - lambda| / sigma_tn.

    The argmin runs over all clusters jointly; exact score ties go to the
    lowest record id.
    """
    return _select(state, dataset)[0]


def run(state: CalibratorState, dataset: Dataset, oracle: LabelOracle) -> CalibratorState:
    """Spend the remaining budget: select, label, refit, repeat.

    Mutates `state` in place and returns it. If the oracle raises, the state
    keeps every label acquired before the failure.
    """
    while state.labels_used < state.budget:
        try:
            record_id, cluster_index, mu_tn, sigma_tn = _select(state, dataset)
        except ValidationError:
            break  # every record is labeled
        label = _oracle_label(oracle, record_id, dataset.num_classes)
        target = _correction_target(dataset, record_id, label)
        cluster = state.clusters[cluster_index]
        row = dataset.index_of(record_id)
        cluster.add_observation(record_id, dataset.representations[row], target)
        state.labels_used += 1
        state.trace.append(TraceEntry(
            step=state.labels_used, record_id=record_id, cluster=cluster_index,
            mu_tn_before=mu_tn, sigma_tn_before=sigma_tn, assigned_label=label))
    return state


def calibrate(dataset: Dataset, budget: int, oracle: LabelOracle,
              num_clusters: Optional[int] = None, cost: Optional[CostModel] = None,
              seed: int = 0) -> CalibratorState:
    """Initialize and run to budget in one call."""
    if num_clusters is None:
        num_clusters = default_cluster_count(len(dataset.records))
    state = initialize(dataset, num_clusters, budget, cost, seed, oracle)
    return run(state, dataset, oracle)


def replay(dataset: Dataset, num_clusters: int, cost: Optional[CostModel],
           seed: int, labels: Sequence[tuple[int, int]],
           budget: Optional[int] = None) -> CalibratorState:
    """Rebuild the state a run with this exact label sequence would reach.

    `labels` must start with the medoids in cluster order, as recorded in a
    trace; each cluster GP is refit once from its accumulated observations,
    so the result matches an actual run that labeled the same records.
    """
    labels = list(labels)
    if budget is None:
        budget = max(len(labels), num_clusters)
    served: dict[int, int] = {}
    for record_id, label in labels:
        if record_id in served:
            raise ValidationError(f"id {record_id} labeled twice in replay sequence")
        served[record_id] = label

    def oracle(record_id: int) -> int:
        try:
            return served[record_id]
        except KeyError:
            raise ValidationError(f"replay sequence has no label for id {record_id}") from None

    state = initialize(dataset, num_clusters, budget, cost, seed, oracle)
    medoid_prefix = [(c.medoid_id, served[c.medoid_id]) for c in state.clusters]
    if labels[:len(medoid_prefix)] != medoid_prefix:
        raise ValidationError("replay sequence does not start with the medoid labels")
    for record_id, label in labels[num_clusters:]:
        cluster_index = state.cluster_index_of(record_id)
        if cluster_index is None:
            raise ValidationError(f"replay id {record_id} is not in the dataset")
        cluster = state.clusters[cluster_index]
        if cluster.is_labeled(record_id):
            raise ValidationError(f"id {record_id} already labeled")
        row = dataset.index_of(record_id)
        mu, sigma = posterior_batch(cluster.gp, dataset.representations[row][None, :])
        mean, std, _, _, _ = truncated_moments_arrays(
            np.array([dataset.confidences[row]]), mu, sigma)
        target = _correction_target(dataset, record_id, label)
        cluster.add_observation(record_id, dataset.representations[row], target)
        state.labels_used += 1
        state.trace.append(TraceEntry(
            step=state.labels_used, record_id=record_id,
            cluster=cluster.cluster_index, mu_tn_before=float(mean[0]),
            sigma_tn_before=float(std[0]), assigned_label=label))
    return state


def _cluster_of(state: CalibratorState, record: OperationRecord) -> ClusterModel:
    if state.is_calibration_record(record):
        index = state.cluster_index_of(record.id)
    else:
        deltas = state.medoid_matrix - np.asarray(record.representation)[None, :]
        index = int(np.argmin(np.sum(deltas ** 2, axis=1)))
    return state.clusters[index]


def confidence_posterior(state: CalibratorState, record: OperationRecord,
                         ) -> ConfidencePosterior:
    """Full truncated-normal posterior for one record.

    Records outside the calibration set are routed to the cluster with the
    nearest medoid.
    """
    cluster = _cluster_of(state, record)
    rep = np.asarray(record.representation, dtype=np.float64)
    mu, sigma = posterior_batch(cluster.gp, rep[None, :])
    confidence = derive_outputs(record).original_confidence
    return truncated_moments(confidence, float(mu[0]), float(sigma[0]))


def calibrated_confidence(state: CalibratorState, record: OperationRecord) -> float:
    """Calibrated confidence mu_tn; the predicted class is never changed."""
    return confidence_posterior(state, record).mean


def calibrated_confidences(state: CalibratorState, dataset: Dataset) -> np.ndarray:
    """Calibrated confidence for every record, grouped by cluster for speed."""
    n = len(dataset.records)
    reps = dataset.representations
    cluster_rows: dict[int, list[int]] = {}
    unseen_rows = []
    for i, rec in enumerate(dataset.records):
        if state.is_calibration_record(rec):
            cluster_rows.setdefault(state.cluster_index_of(rec.id), []).append(i)
        else:
            unseen_rows.append(i)
    if unseen_rows:
        medoids = state.medoid_matrix
        block = reps[unseen_rows]
        sq = (np.sum(block ** 2, axis=1)[:, None] + np.sum(medoids ** 2, axis=1)[None, :]
              - 2.0 * (block @ medoids.T))
        nearest = np.argmin(sq, axis=1)
        for row, index in zip(unseen_rows, nearest):
            cluster_rows.setdefault(int(index), []).append(row)

    result = np.empty(n, dtype=np.float64)
    confidences = dataset.confidences
    for index, rows in cluster_rows.items():
        rows = np.array(rows)
        mu, sigma = posterior_batch(state.clusters[index].gp, reps[rows])
        mean, _, _, _, _ = truncated_moments_arrays(confidences[rows], mu, sigma)
        result[rows] = mean
    return result


def write_trace(path, entries: Iterable[TraceEntry]) -> None:
    lines = [TRACE_HEADER]
    for e in entries:
        lines.append(",".join([
            str(e.step), str(e.record_id), str(e.cluster),
            format_float(e.mu_tn_before), format_float(e.sigma_tn_before),
            str(e.assigned_label)]))
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")


def save_state(path, state: CalibratorState) -> None:
    """Serialize a state as the recipe that rebuilds it via replay.

    The file holds the clustering configuration and the ordered label
    assignments; together with the calibration dataset those reproduce the
    exact cluster GPs.
    """
    payload = {
        "format": "opcal-calibrator-state",
        "version": 1,
        "seed": state.seed,
        "num_clusters": len(state.clusters),
        "budget": state.budget,
        "loss_u": None if state.cost is None else state.cost.loss_u,
        "labels": [[rid, label] for rid, label in state.labeled_pairs()],
    }
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=1)
        handle.write("\n")


def load_state(path, dataset: Dataset) -> CalibratorState:
    """Rebuild a saved state against its calibration dataset."""
    with open(path) as handle:
        payload = json.load(handle)
    if payload.get("format") != "opcal-calibrator-state":
        raise ValidationError(f"{path} is not a calibrator state file")
    cost = None if payload["loss_u"] is None else CostModel.from_loss(payload["loss_u"])
    return replay(dataset, payload["num_clusters"], cost, payload["seed"],
                  [(int(r), int(l)) for r, l in payload["labels"]],
                  budget=payload["budget"])


def read_trace(path) -> list[TraceEntry]:
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or ",".join(rows[0]) != TRACE_HEADER:
        raise ValidationError(f"bad trace header in {path}")
    entries = []
    for row in rows[1:]:
        if len(row) != 6:
            raise ValidationError(f"trace row has {len(row)} fields, expected 6")
        entries.append(TraceEntry(
            step=int(row[0]), record_id=int(row[1]), cluster=int(row[2]),
            mu_tn_before=float(row[3]), sigma_tn_before=float(row[4]),
            assigned_label=int(row[5])))
    return entries
