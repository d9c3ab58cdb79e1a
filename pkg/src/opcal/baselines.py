"""Conventional confidence calibrators used as comparison points.

Four methods, all fitted on the labeled subset of a dataset:

- temperature: rescale logits h/T, T found by golden-section search on the
  negative log likelihood over [0.05, 20].
- platt_conf: logistic regression on the scalar confidence,
  c_hat = sigmoid(a * c_M - b), fitted against the correctness indicator.
- platt_logit: full logit remap softmax(W^T h + b) against class labels.
  This is the one calibrator allowed to change predictions.
- isotonic: least-squares monotone step function from c_M to correctness,
  via pool-adjacent-violators; it minimizes the Brier score among monotone
  functions.

Every optimizer is deterministic and fully pinned (search bounds, step
size, iteration caps, stopping thresholds), so refits are reproducible to
the bit. Models serialize to key=value text blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, OperationRecord, derive_outputs, format_float, softmax
from .errors import ValidationError

TEMPERATURE_BOUNDS = (0.05, 20.0)
TEMPERATURE_TOLERANCE = 1e-5
GRADIENT_STEP = 0.1
MAX_GRADIENT_ITERATIONS = 10_000
GRADIENT_NORM_TOLERANCE = 1e-8
DEGENERATE_CLAMP = 1e-6

CALIBRATOR_NAMES = ("temperature", "platt_conf", "platt_logit", "isotonic")

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TemperatureModel:
    temperature: float

    def __post_init__(self):
        low, high = TEMPERATURE_BOUNDS
        if not (low <= self.temperature <= high):
            raise ValidationError(
                f"temperature {self.temperature} outside [{low}, {high}]")


@dataclass(frozen=True)
class PlattConfModel:
    a: float
    b: float
    degenerate: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValidationError(f"non-finite parameters a={self.a}, b={self.b}")


@dataclass(frozen=True)
class PlattLogitModel:
    weights: np.ndarray  # (K, K)
    bias: np.ndarray  # (K,)
    degenerate: bool = False

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValidationError(f"weights must be square, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValidationError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("non-finite parameters")


@dataclass(frozen=True)
class IsotonicModel:
    breakpoints: np.ndarray  # strictly increasing confidences
    values: np.ndarray  # non-decreasing outputs in [0, 1]

    def __post_init__(self):
        if self.breakpoints.shape != self.values.shape or self.breakpoints.ndim != 1:
            raise ValidationError("breakpoints and values must be 1-D and aligned")
        if self.breakpoints.size == 0:
            raise ValidationError("isotonic model needs at least one step")
        if np.any(np.diff(self.breakpoints) <= 0.0):
            raise ValidationError("breakpoints must be strictly increasing")
        if np.any(np.diff(self.values) < 0.0):
            raise ValidationError("values must be non-decreasing")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValidationError("values must lie in [0, 1]")


def _labeled_rows(dataset: Dataset) -> np.ndarray:
    rows = np.array([i for i, rec in enumerate(dataset.records) if rec.label is not None],
                    dtype=np.int64)
    if rows.size == 0:
        raise ValidationError("no labeled records to fit on")
    return rows


def _labels_at(dataset: Dataset, rows: np.ndarray) -> np.ndarray:
    return np.array([dataset.records[i].label for i in rows], dtype=np.int64)


def _correctness_at(dataset: Dataset, rows: np.ndarray) -> np.ndarray:
    labels = _labels_at(dataset, rows)
    return (labels == dataset.predicted_classes[rows]).astype(np.float64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def temperature_nll(dataset: Dataset, temperature: float) -> float:
    """Mean negative log likelihood of the true labels under h/T."""
    rows = _labeled_rows(dataset)
    labels = _labels_at(dataset, rows)
    scaled = dataset.logit_matrix[rows] / temperature
    log_probs = _log_softmax(scaled)
    return float(-np.mean(log_probs[np.arange(rows.size), labels]))


def fit_temperature(dataset: Dataset) -> TemperatureModel:
    """Golden-section search for the NLL-minimizing temperature.

    The bracket shrinks by the golden ratio each step until it is narrower
    than 1e-5; the NLL is unimodal in T for a fixed label set.
    """
    rows = _labeled_rows(dataset)
    labels = _labels_at(dataset, rows)
    logits = dataset.logit_matrix[rows]
    index = np.arange(rows.size)

    def nll(t: float) -> float:
        log_probs = _log_softmax(logits / t)
        return float(-np.mean(log_probs[index, labels]))

    low, high = TEMPERATURE_BOUNDS
    x1 = high - _INV_PHI * (high - low)
    x2 = low + _INV_PHI * (high - low)
    f1, f2 = nll(x1), nll(x2)
    while high - low > TEMPERATURE_TOLERANCE:
        if f1 <= f2:
            high, x2, f2 = x2, x1, f1
            x1 = high - _INV_PHI * (high - low)
            f1 = nll(x1)
        else:
            low, x1, f1 = x1, x2, f2
            x2 = low + _INV_PHI * (high - low)
            f2 = nll(x2)
    return TemperatureModel(temperature=(low + high) / 2.0)


def apply_temperature_batch(model: TemperatureModel, dataset: Dataset) -> np.ndarray:
    scaled = dataset.logit_matrix / model.temperature
    shifted = scaled - np.max(scaled, axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= np.sum(probs, axis=1, keepdims=True)
    return np.max(probs, axis=1)


def apply_temperature(model: TemperatureModel, record: OperationRecord) -> float:
    """Confidence after rescaling: max softmax(h/T). Argmax is unchanged."""
    probs = softmax(record.logits / model.temperature)
    return float(np.max(probs))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def platt_conf_cross_entropy(dataset: Dataset, model: PlattConfModel) -> float:
    """Mean binary cross-entropy of c_hat against correctness."""
    rows = _labeled_rows(dataset)
    indicator = _correctness_at(dataset, rows)
    x = model.a * dataset.confidences[rows] - model.b
    # softplus-based form, exact for saturated sigmoids
    return float(np.mean(np.logaddexp(0.0, -x) + (1.0 - indicator) * x))


def fit_platt_conf(dataset: Dataset) -> PlattConfModel:
    """Logistic fit of correctness on confidence.

    Full-batch gradient descent, step 0.1, up to 10,000 iterations or
    gradient norm below 1e-8, initialized at a = 1, b = 0. A label set with
    only one correctness outcome cannot anchor a slope, so it yields a
    degenerate constant model at the clamped outcome rate.
    """
    rows = _labeled_rows(dataset)
    indicator = _correctness_at(dataset, rows)
    mean_correct = float(np.mean(indicator))
    if mean_correct in (0.0, 1.0):
        p = min(max(mean_correct, DEGENERATE_CLAMP), 1.0 - DEGENERATE_CLAMP)
        return PlattConfModel(a=0.0, b=-math.log(p / (1.0 - p)), degenerate=True)

    confidence = dataset.confidences[rows]
    a, b = 1.0, 0.0
    for _ in range(MAX_GRADIENT_ITERATIONS):
        residual = _sigmoid(a * confidence - b) - indicator
        grad_a = float(np.mean(residual * confidence))
        grad_b = float(-np.mean(residual))
        if math.hypot(grad_a, grad_b) < GRADIENT_NORM_TOLERANCE:
            break
        a -= GRADIENT_STEP * grad_a
        b -= GRADIENT_STEP * grad_b
    return PlattConfModel(a=a, b=b)


def apply_platt_conf_batch(model: PlattConfModel, dataset: Dataset) -> np.ndarray:
    return _sigmoid(model.a * dataset.confidences - model.b)


def apply_platt_conf(model: PlattConfModel, record: OperationRecord) -> float:
    c = derive_outputs(record).original_confidence
    return float(_sigmoid(np.array([model.a * c - model.b]))[0])


def platt_logit_cross_entropy(dataset: Dataset, model: PlattLogitModel) -> float:
    """Mean multiclass cross-entropy of the remapped logits."""
    rows = _labeled_rows(dataset)
    labels = _labels_at(dataset, rows)
    z = dataset.logit_matrix[rows] @ model.weights + model.bias
    log_probs = _log_softmax(z)
    return float(-np.mean(log_probs[np.arange(rows.size), labels]))


def fit_platt_logit(dataset: Dataset) -> PlattLogitModel:
    """Multiclass logistic remap of the logit vector.

    Same optimizer contract as fit_platt_conf, initialized at the identity.
    Unlike every other calibrator here, the result may change predicted
    classes; prediction_changes() reports how many.
    """
    rows = _labeled_rows(dataset)
    labels = _labels_at(dataset, rows)
    k = dataset.num_classes
    if np.unique(labels).size == 1:
        return PlattLogitModel(weights=np.eye(k), bias=np.zeros(k), degenerate=True)

    logits = dataset.logit_matrix[rows]
    onehot = np.zeros((rows.size, k))
    onehot[np.arange(rows.size), labels] = 1.0
    weights = np.eye(k)
    bias = np.zeros(k)
    for _ in range(MAX_GRADIENT_ITERATIONS):
        z = logits @ weights + bias
        shifted = z - np.max(z, axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= np.sum(probs, axis=1, keepdims=True)
        residual = (probs - onehot) / rows.size
        grad_w = logits.T @ residual
        grad_b = np.sum(residual, axis=0)
        norm = math.sqrt(float(np.sum(grad_w ** 2) + np.sum(grad_b ** 2)))
        if norm < GRADIENT_NORM_TOLERANCE:
            break
        weights -= GRADIENT_STEP * grad_w
        bias -= GRADIENT_STEP * grad_b
    return PlattLogitModel(weights=weights, bias=bias)


def apply_platt_logit_batch(model: PlattLogitModel, dataset: Dataset) -> np.ndarray:
    """Remapped softmax mass at each record's original predicted class.

    The prediction itself is left alone: even when the remap would move the
    argmax, the calibrated confidence is read at the class the model
    actually output.
    """
    z = dataset.logit_matrix @ model.weights + model.bias
    shifted = z - np.max(z, axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= np.sum(probs, axis=1, keepdims=True)
    return probs[np.arange(probs.shape[0]), dataset.predicted_classes]


def apply_platt_logit(model: PlattLogitModel, record: OperationRecord) -> float:
    z = record.logits @ model.weights + model.bias
    return float(softmax(z)[int(np.argmax(record.logits))])


def platt_logit_predictions(model: PlattLogitModel, dataset: Dataset) -> np.ndarray:
    """Argmax classes after the logit remap."""
    z = dataset.logit_matrix @ model.weights + model.bias
    return np.argmax(z, axis=1)


def prediction_changes(model: PlattLogitModel, dataset: Dataset) -> int:
    """How many records the remap assigns a different class than the model did."""
    return int(np.sum(platt_logit_predictions(model, dataset)
                      != dataset.predicted_classes))


def fit_isotonic(dataset: Dataset) -> IsotonicModel:
    """Pool-adjacent-violators over (c_M, correctness), ties pooled first.

    The result is the least-squares monotone step function, which is also
    the Brier-minimizing monotone calibration map.
    """
    rows = _labeled_rows(dataset)
    indicator = _correctness_at(dataset, rows)
    confidence = dataset.confidences[rows]
    order = np.argsort(confidence, kind="stable")
    confidence = confidence[order]
    indicator = indicator[order]

    # Pre-pool exact confidence ties into weighted points.
    points: list[list[float]] = []  # [confidence, mean, weight]
    for c, y in zip(confidence, indicator):
        if points and points[-1][0] == c:
            _, mean, weight = points[-1]
            points[-1][1] = (mean * weight + y) / (weight + 1.0)
            points[-1][2] = weight + 1.0
        else:
            points.append([float(c), float(y), 1.0])

    # PAVA: merge any adjacent blocks that violate monotonicity.
    blocks: list[list[float]] = []  # [first_confidence, mean, weight]
    for c, mean, weight in points:
        blocks.append([c, mean, weight])
        while len(blocks) > 1 and blocks[-2][1] > blocks[-1][1]:
            c2, m2, w2 = blocks.pop()
            c1, m1, w1 = blocks.pop()
            blocks.append([c1, (m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2])

    breakpoints, values = [], []
    block_iter = iter(blocks)
    block = next(block_iter)
    upcoming = next(block_iter, None)
    for c, _, _ in points:
        if upcoming is not None and c >= upcoming[0]:
            block = upcoming
            upcoming = next(block_iter, None)
        breakpoints.append(c)
        values.append(block[1])
    return IsotonicModel(breakpoints=np.array(breakpoints), values=np.array(values))


def apply_isotonic_batch(model: IsotonicModel, dataset: Dataset) -> np.ndarray:
    idx = np.searchsorted(model.breakpoints, dataset.confidences, side="right") - 1
    np.clip(idx, 0, model.breakpoints.size - 1, out=idx)
    return model.values[idx]


def apply_isotonic(model: IsotonicModel, record: OperationRecord) -> float:
    """Step-function lookup; inputs beyond the fitted range clamp to the ends."""
    c = derive_outputs(record).original_confidence
    idx = int(np.searchsorted(model.breakpoints, c, side="right")) - 1
    idx = min(max(idx, 0), model.breakpoints.size - 1)
    return float(model.values[idx])


def write_model(path, model) -> None:
    """Serialize any baseline model as a key=value block."""
    lines = []
    if isinstance(model, TemperatureModel):
        lines.append("calibrator = temperature")
        lines.append(f"temperature = {format_float(model.temperature)}")
    elif isinstance(model, PlattConfModel):
        lines.append("calibrator = platt_conf")
        lines.append(f"a = {format_float(model.a)}")
        lines.append(f"b = {format_float(model.b)}")
        lines.append(f"degenerate = {'true' if model.degenerate else 'false'}")
    elif isinstance(model, PlattLogitModel):
        k = model.weights.shape[0]
        lines.append("calibrator = platt_logit")
        lines.append(f"num_classes = {k}")
        lines.append(f"degenerate = {'true' if model.degenerate else 'false'}")
        for i in range(k):
            for j in range(k):
                lines.append(f"w_{i}_{j} = {format_float(model.weights[i, j])}")
        for i in range(k):
            lines.append(f"b_{i} = {format_float(model.bias[i])}")
    elif isinstance(model, IsotonicModel):
        lines.append("calibrator = isotonic")
        lines.append(f"num_steps = {model.breakpoints.size}")
        for i in range(model.breakpoints.size):
            lines.append(f"breakpoint_{i} = {format_float(model.breakpoints[i])}")
            lines.append(f"value_{i} = {format_float(model.values[i])}")
    else:
        raise ValidationError(f"unknown model type {type(model).__name__}")
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")


def _parse_block(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"malformed line in {path}: {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def read_model(path):
    """Load a serialized baseline model; the calibrator key selects the type."""
    entries = _parse_block(path)
    kind = entries.get("calibrator")
    if kind == "temperature":
        return TemperatureModel(temperature=float(entries["temperature"]))
    if kind == "platt_conf":
        return PlattConfModel(a=float(entries["a"]), b=float(entries["b"]),
                              degenerate=entries.get("degenerate") == "true")
    if kind == "platt_logit":
        k = int(entries["num_classes"])
        weights = np.array([[float(entries[f"w_{i}_{j}"]) for j in range(k)]
                            for i in range(k)])
        bias = np.array([float(entries[f"b_{i}"]) for i in range(k)])
        return PlattLogitModel(weights=weights, bias=bias,
                               degenerate=entries.get("degenerate") == "true")
    if kind == "isotonic":
        n = int(entries["num_steps"])
        breakpoints = np.array([float(entries[f"breakpoint_{i}"]) for i in range(n)])
        values = np.array([float(entries[f"value_{i}"]) for i in range(n)])
        return IsotonicModel(breakpoints=breakpoints, values=values)
    raise ValidationError(
        f"unknown calibrator {kind!r} in {path}; expected one of {CALIBRATOR_NAMES}")
