"""Operation-domain data model and CSV file format.

A dataset holds one record per operation-domain input: the classifier's
last-hidden-layer representation vector, its logit vector, and an optional
true label. Model outputs (softmax probabilities, predicted class, original
confidence) are derived here, never re-inferred.

File format (UTF-8, LF):
    id,label,logit_0,...,logit_{K-1},feat_0,...,feat_{D-1}
with label -1 for unlabeled rows. Floats are written as shortest
round-trip decimals so write(read(f)) reproduces a canonical file
byte-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ValidationError

UNLABELED = -1


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically safe softmax with max-subtraction.

    Preserves the argmax of the input (ties resolve to the lowest index in
    both). Components that are more than ~745 below the maximum underflow
    to exactly 0.0; inputs at that scale are outside the intended regime.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValidationError(f"logits must be a vector of length >= 2, got shape {logits.shape}")
    bad = np.flatnonzero(~np.isfinite(logits))
    if bad.size:
        raise ValidationError(f"non-finite logit at index {bad[0]}")
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


@dataclass
class OperationRecord:
    """One operation-domain example: representation z, logits h, optional label."""

    id: int
    representation: np.ndarray
    logits: np.ndarray
    label: int | None = None

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"record id must be non-negative, got {self.id}")
        self.representation = np.asarray(self.representation, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.representation.ndim != 1 or self.representation.shape[0] < 1:
            raise ValidationError(f"record {self.id}: representation must be a non-empty vector")
        if self.logits.ndim != 1 or self.logits.shape[0] < 2:
            raise ValidationError(f"record {self.id}: logits must have length >= 2")
        bad = np.flatnonzero(~np.isfinite(self.representation))
        if bad.size:
            raise ValidationError(f"record {self.id}: non-finite feature at index {bad[0]}")
        bad = np.flatnonzero(~np.isfinite(self.logits))
        if bad.size:
            raise ValidationError(f"record {self.id}: non-finite logit at index {bad[0]}")
        if self.label is not None:
            k = self.logits.shape[0]
            if not 0 <= self.label < k:
                raise ValidationError(f"record {self.id}: label {self.label} outside [0, {k})")


@dataclass
class ModelOutputs:
    """Derived softmax probabilities, predicted class, and original confidence."""

    probabilities: np.ndarray
    predicted_class: int
    original_confidence: float

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError("probabilities must sum to 1 within 1e-9")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValidationError("probabilities outside [0, 1]")
        if self.original_confidence != p[self.predicted_class]:
            raise ValidationError("original_confidence must equal probabilities[predicted_class]")
        if self.original_confidence < 1.0 / p.shape[0] - 1e-12:
            raise ValidationError("original_confidence below 1/K")
        self.probabilities = p


def derive_outputs(record: OperationRecord) -> ModelOutputs:
    """Compute the model outputs for one record from its logits.

    The predicted class is the argmax of the logits (lowest index on ties),
    which under exact arithmetic equals the argmax of the softmax.
    """
    probs = softmax(record.logits)
    predicted = int(np.argmax(record.logits))
    return ModelOutputs(
        probabilities=probs,
        predicted_class=predicted,
        original_confidence=float(probs[predicted]),
    )


@dataclass
class Dataset:
    """Index-aligned records and derived outputs with uniform D and K."""

    records: list[OperationRecord]
    outputs: list[ModelOutputs]
    feature_dim: int
    num_classes: int
    _index_of: dict[int, int] = field(default_factory=dict, repr=False)

    @classmethod
    def from_records(cls, records: list[OperationRecord]) -> "Dataset":
        if not records:
            raise ValidationError("dataset must contain at least one record")
        d = records[0].representation.shape[0]
        k = records[0].logits.shape[0]
        index_of: dict[int, int] = {}
        outputs = []
        for i, rec in enumerate(records):
            if rec.representation.shape[0] != d:
                raise ValidationError(
                    f"record {rec.id}: feature dimension {rec.representation.shape[0]} != {d}"
                )
            if rec.logits.shape[0] != k:
                raise ValidationError(f"record {rec.id}: logit dimension {rec.logits.shape[0]} != {k}")
            if rec.id in index_of:
                raise ValidationError(f"duplicate record id {rec.id}")
            index_of[rec.id] = i
            outputs.append(derive_outputs(rec))
        return cls(records=list(records), outputs=outputs, feature_dim=d, num_classes=k,
                   _index_of=index_of)

    def __len__(self) -> int:
        return len(self.records)

    def index_of(self, record_id: int) -> int:
        try:
            return self._index_of[record_id]
        except KeyError:
            raise ValidationError(f"unknown record id {record_id}") from None

    def record(self, record_id: int) -> OperationRecord:
        return self.records[self.index_of(record_id)]

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([r.id for r in self.records], dtype=np.int64)

    @cached_property
    def representations(self) -> np.ndarray:
        """(N, D) matrix of representation vectors, in record order."""
        return np.stack([r.representation for r in self.records])

    @cached_property
    def confidences(self) -> np.ndarray:
        """(N,) vector of original confidences c_M."""
        return np.array([o.original_confidence for o in self.outputs])

    @cached_property
    def predicted_classes(self) -> np.ndarray:
        return np.array([o.predicted_class for o in self.outputs], dtype=np.int64)

    @cached_property
    def logit_matrix(self) -> np.ndarray:
        return np.stack([r.logits for r in self.records])

    def labels(self) -> np.ndarray:
        """(N,) label vector; raises if any record is unlabeled."""
        out = np.empty(len(self.records), dtype=np.int64)
        for i, rec in enumerate(self.records):
            if rec.label is None:
                raise ValidationError(f"record {rec.id} is unlabeled")
            out[i] = rec.label
        return out

    def correctness(self) -> np.ndarray:
        """0/1 indicator per record: 1 iff true label equals predicted class."""
        return (self.labels() == self.predicted_classes).astype(np.float64)


def correctness_of(record: OperationRecord, output: ModelOutputs) -> int:
    """Correctness indicator for a single labeled record."""
    if record.label is None:
        raise ValidationError(f"record {record.id} is unlabeled")
    return int(record.label == output.predicted_class)


def attach_label(dataset: Dataset, record_id: int, label: int) -> Dataset:
    """Set a record's true label. Labels are immutable once set.

    Attaching the same value twice is an idempotent success; a different
    value is an error. Returns the (mutated) dataset for chaining.
    """
    rec = dataset.record(record_id)
    if not 0 <= label < dataset.num_classes:
        raise ValidationError(
            f"label {label} outside [0, {dataset.num_classes}) for record {record_id}"
        )
    if rec.label is not None:
        if rec.label != label:
            raise ValidationError(
                f"record {record_id} already labeled {rec.label}; refusing relabel to {label}"
            )
        return dataset
    rec.label = label
    return dataset


def format_float(x: float) -> str:
    return repr(float(x))


def _parse_header(header: str) -> tuple[int, int]:
    fields = header.split(",")
    if len(fields) < 5 or fields[0] != "id" or fields[1] != "label":
        raise ValidationError(f"malformed header: expected 'id,label,logit_0,...', got {header!r}")
    k = 0
    pos = 2
    while pos < len(fields) and fields[pos] == f"logit_{k}":
        k += 1
        pos += 1
    d = 0
    while pos < len(fields) and fields[pos] == f"feat_{d}":
        d += 1
        pos += 1
    if pos != len(fields) or k < 2 or d < 1:
        raise ValidationError(
            f"malformed header: need logit_0..logit_{{K-1}} (K>=2) then feat_0..feat_{{D-1}} (D>=1), got {header!r}"
        )
    return k, d


def read_dataset(path: str | Path) -> Dataset:
    """Parse a dataset CSV. Errors name the offending 1-based data row."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValidationError(f"{path}: empty file")
    k, d = _parse_header(lines[0])
    expected_fields = 2 + k + d
    records: list[OperationRecord] = []
    seen: set[int] = set()
    for row_num, line in enumerate(lines[1:], start=1):
        fields = line.split(",")
        if len(fields) != expected_fields:
            raise ValidationError(
                f"row {row_num}: expected {expected_fields} fields (K={k}, D={d}), got {len(fields)}"
            )
        try:
            rec_id = int(fields[0])
        except ValueError:
            raise ValidationError(f"row {row_num}: invalid id {fields[0]!r}") from None
        if rec_id in seen:
            raise ValidationError(f"row {row_num}: duplicate id {rec_id}")
        seen.add(rec_id)
        try:
            raw_label = int(fields[1])
        except ValueError:
            raise ValidationError(f"row {row_num}: invalid label {fields[1]!r}") from None
        if raw_label != UNLABELED and not 0 <= raw_label < k:
            raise ValidationError(f"row {row_num}: label {raw_label} outside [0, {k}) and not -1")
        try:
            values = [float(v) for v in fields[2:]]
        except ValueError:
            raise ValidationError(f"row {row_num}: unparsable numeric field") from None
        if not all(np.isfinite(values)):
            raise ValidationError(f"row {row_num}: non-finite value")
        try:
            records.append(OperationRecord(
                id=rec_id,
                logits=np.array(values[:k]),
                representation=np.array(values[k:]),
                label=None if raw_label == UNLABELED else raw_label,
            ))
        except ValidationError as exc:
            raise ValidationError(f"row {row_num}: {exc}") from None
    if not records:
        raise ValidationError(f"{path}: no data rows")
    return Dataset.from_records(records)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the canonical CSV rendering (see module docstring)."""
    k, d = dataset.num_classes, dataset.feature_dim
    header = "id,label," + ",".join(f"logit_{i}" for i in range(k)) \
        + "," + ",".join(f"feat_{i}" for i in range(d))
    lines = [header]
    for rec in dataset.records:
        label = UNLABELED if rec.label is None else rec.label
        parts = [str(rec.id), str(label)]
        parts.extend(format_float(v) for v in rec.logits)
        parts.extend(format_float(v) for v in rec.representation)
        lines.append(",".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar_config(path: str | Path) -> dict[str, str]:
    """Parse a 'key = value' sidecar config (lambda, budget, clusters, seed).

    Blank lines and '#' comments are ignored; values stay strings and the
    CLI interprets them, with flags taking precedence.
    """
    config: dict[str, str] = {}
    for line_num, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path} line {line_num}: expected 'key = value'")
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    return config
