"""Bridge from live PyTorch classifiers to the calibration toolkit's CSV.

The calibration tools consume a flat file with one row per operation-domain
input:

    id,label,logit_0,...,logit_{K-1},feat_0,...,feat_{D-1}

This module produces that file straight from a trained model. It locates the
model's final linear layer, hooks that layer's input as the feature vector z,
and takes the model's returned tensor as the logit row h, so every exported
pair satisfies h = W z + b with (W, b) read off the hooked layer. The model
runs in eval mode under no_grad, batches stream to disk strictly in input
order, and floats are written as shortest round-trip decimals, so re-running
an extraction reproduces the file byte for byte. A one-line JSON sidecar next
to the CSV records the model name, the hooked layer, and the dimensions.

Unlabeled rows carry the sentinel label -1. A labels array may mix real
labels with -1 for partially labeled operation sets.

Only classifiers with a single affine output head are supported: the model
must return one (batch, K) tensor with K >= 2 that is literally the output
of one of its linear layers. Multi-head models, models whose last op is a
nonlinearity, and models that change routing between batches are rejected
rather than guessed at.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

UNLABELED = -1

CONSISTENCY_TOLERANCE = 1e-5


class ExtractionError(ValueError):
    """Raised when the model, its inputs, or the export contract is violated."""


@dataclass
class ExtractionConfig:
    """Everything one extraction run needs.

    model: a torch module, or a path to a torch.save archive of one.
    inputs: an (N, ...) array or tensor, or a path to a .npy or .pt file.
    output_path: destination CSV; a .meta.json sidecar is written next to it.
    batch_size: rows per forward pass.
    layer: name of the module whose input becomes the feature vector. None
        selects the final linear layer automatically, which makes each logit
        row an exact affine map of its feature row.
    labels: optional (N,) integers, or a path (.npy, .pt, or one integer per
        line). None means unlabeled: every row gets the sentinel -1.
    """

    model: nn.Module | str | Path
    inputs: torch.Tensor | np.ndarray | Sequence | str | Path
    output_path: str | Path
    batch_size: int = 64
    layer: str | None = None
    labels: torch.Tensor | np.ndarray | Sequence | str | Path | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ExtractionError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ExtractionResult:
    """What extract() wrote and the dimensions it found."""

    output_path: Path
    metadata_path: Path
    num_rows: int
    num_classes: int
    feature_dim: int
    layer: str


def format_value(x: float) -> str:
    """Shortest decimal that round-trips to the same float."""
    return repr(float(x))


def _load_model(ref: nn.Module | str | Path) -> nn.Module:
    if isinstance(ref, nn.Module):
        return ref
    path = Path(ref)
    if not path.exists():
        raise ExtractionError(f"model file not found: {path}")
    try:
        # Archives hold a pickled module, so only load files you trust.
        obj = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ExtractionError(f"could not load model from {path}: {exc}") from exc
    if not isinstance(obj, nn.Module):
        raise ExtractionError(
            f"{path} does not contain a torch module, got {type(obj).__name__}"
        )
    return obj


def _load_tensor_file(path: Path, kind: str) -> torch.Tensor:
    if path.suffix == ".npy":
        return torch.from_numpy(np.load(path))
    if path.suffix in (".pt", ".pth"):
        obj = torch.load(path, map_location="cpu", weights_only=True)
        if not isinstance(obj, torch.Tensor):
            raise ExtractionError(
                f"{path} does not hold a tensor, got {type(obj).__name__}"
            )
        return obj.detach().cpu()
    raise ExtractionError(f"unsupported {kind} format {path.suffix!r}; use .npy or .pt")


def _load_inputs(ref) -> torch.Tensor:
    if isinstance(ref, torch.Tensor):
        tensor = ref.detach().cpu()
    elif isinstance(ref, (str, Path)):
        path = Path(ref)
        if not path.exists():
            raise ExtractionError(f"input file not found: {path}")
        tensor = _load_tensor_file(path, "input")
    else:
        tensor = torch.as_tensor(np.asarray(ref))
    if tensor.ndim < 2 or len(tensor) == 0:
        raise ExtractionError(
            f"inputs must be a non-empty (N, ...) batch, got shape {tuple(tensor.shape)}"
        )
    return tensor


def _load_labels(ref, n: int) -> np.ndarray | None:
    if ref is None:
        return None
    if isinstance(ref, torch.Tensor):
        raw = ref.detach().cpu().numpy()
    elif isinstance(ref, (str, Path)):
        path = Path(ref)
        if not path.exists():
            raise ExtractionError(f"label file not found: {path}")
        if path.suffix in (".npy", ".pt", ".pth"):
            raw = _load_tensor_file(path, "label").numpy()
        else:
            try:
                raw = np.loadtxt(path, dtype=np.int64, ndmin=1)
            except ValueError as exc:
                raise ExtractionError(f"could not parse labels from {path}: {exc}") from exc
    else:
        raw = np.asarray(ref)
    if raw.ndim != 1:
        raise ExtractionError(f"labels must be one value per input, got shape {raw.shape}")
    if len(raw) != n:
        raise ExtractionError(f"{len(raw)} labels for {n} inputs")
    if not np.issubdtype(raw.dtype, np.integer):
        as_int = raw.astype(np.int64)
        if not np.array_equal(as_int, raw):
            raise ExtractionError("labels must be integers")
        raw = as_int
    return raw.astype(np.int64)


def _check_output(output, batch_rows: int) -> torch.Tensor:
    if not isinstance(output, torch.Tensor):
        raise ExtractionError(
            f"multi-head or non-tensor model output ({type(output).__name__}); "
            "only classifiers returning one (batch, classes) tensor are supported"
        )
    if output.ndim != 2 or output.shape[0] != batch_rows:
        raise ExtractionError(
            f"expected a ({batch_rows}, classes) output, got shape {tuple(output.shape)}"
        )
    if output.shape[1] < 2:
        raise ExtractionError(
            f"a classifier needs at least 2 output classes, got {output.shape[1]}"
        )
    if not torch.is_floating_point(output):
        raise ExtractionError(f"model output must be floating point, got {output.dtype}")
    return output


def _probe(model: nn.Module, batch: torch.Tensor):
    """One forward pass with a hook on every linear layer.

    Returns the model output and the capture list, one (name, module, input,
    output) entry per linear call in execution order.
    """
    captures: list[tuple[str, nn.Module, torch.Tensor, torch.Tensor]] = []
    handles = []

    def grab(name: str):
        def hook(module, inputs, output):
            if inputs:
                captures.append((name, module, inputs[0], output))
        return hook

    for name, module in model.named_modules():
        if isinstance(module, nn.Linear):
            handles.append(module.register_forward_hook(grab(name)))
    if not handles:
        raise ExtractionError(
            "model contains no linear layers; cannot identify an affine classification head"
        )
    try:
        with torch.no_grad():
            output = model(batch)
    finally:
        for handle in handles:
            handle.remove()
    return output, captures


def find_final_linear(model: nn.Module, sample_batch: torch.Tensor) -> tuple[str, nn.Linear]:
    """Name the linear layer whose output is the model's output.

    Runs one probe pass over sample_batch and compares every linear layer's
    output against the tensor the model returned, preferring object identity
    over value equality and later calls over earlier ones. Raises when no
    linear layer produced the output, since then the logits could not be tied
    to an affine map of any feature vector.
    """
    output, captures = _probe(model, sample_batch)
    output = _check_output(output, len(sample_batch))
    for name, module, _, out in reversed(captures):
        if out is output:
            return name, module
    for name, module, _, out in reversed(captures):
        if out.shape == output.shape and torch.equal(out, output):
            return name, module
    raise ExtractionError(
        "no final linear layer found: the model output is not the output of a "
        "linear layer, so logits cannot be tied to an affine map of features"
    )


def _resolve_layer(model: nn.Module, name: str) -> nn.Module:
    for mod_name, module in model.named_modules():
        if mod_name == name:
            if not isinstance(module, nn.Linear):
                raise ExtractionError(
                    f"layer {name!r} is not a linear layer ({type(module).__name__})"
                )
            return module
    available = [n for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    listing = ", ".join(repr(n) for n in available) if available else "none"
    raise ExtractionError(f"layer {name!r} not found; linear layers: {listing}")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def _self_check(output: torch.Tensor, logits64: np.ndarray, start: int) -> None:
    """softmax of the written logits must match the model's own probabilities.

    The model side is computed in the model's precision, the written side from
    the float64 values that land in the file, so a wrong layer, a wrong axis,
    or a scaled copy shows up as a gap far above the tolerance.
    """
    model_probs = torch.softmax(output.detach(), dim=1).cpu().double().numpy()
    written = _softmax_rows(logits64)
    gaps = np.abs(written - model_probs).max(axis=1)
    worst = int(np.argmax(gaps))
    if gaps[worst] > CONSISTENCY_TOLERANCE:
        raise ExtractionError(
            f"consistency self-check failed at row {start + worst}: softmax of the "
            f"exported logits differs from the model probabilities by {gaps[worst]:.3g}"
        )


def _header(num_classes: int, feature_dim: int) -> str:
    return (
        "id,label,"
        + ",".join(f"logit_{i}" for i in range(num_classes))
        + ","
        + ",".join(f"feat_{i}" for i in range(feature_dim))
    )


def extract(config: ExtractionConfig) -> ExtractionResult:
    """Run the model over the inputs and write the dataset CSV plus sidecar.

    Streams one batch at a time: each forward pass hooks the selected layer,
    verifies shapes against the first batch (any change raises a dimension
    drift error), runs the softmax consistency self-check, and appends rows
    id,label,logits...,features... in input order. Ids are the 0-based input
    positions.
    """
    model = _load_model(config.model)
    inputs = _load_inputs(config.inputs)
    n = len(inputs)
    labels = _load_labels(config.labels, n)
    param = next(model.parameters(), None)
    if param is None:
        raise ExtractionError("model has no parameters")
    inputs = inputs.to(param.dtype)

    was_training = model.training
    model.eval()
    try:
        probe_batch = inputs[: min(config.batch_size, n)]
        final_name, final_module = find_final_linear(model, probe_batch)
        if config.layer is None:
            hook_name, hooked = final_name, final_module
        else:
            hook_name, hooked = config.layer, _resolve_layer(model, config.layer)
        return _run(config, model, inputs, labels, hook_name, hooked,
                    hooked is final_module, final_name)
    finally:
        if was_training:
            model.train()


def _run(config, model, inputs, labels, hook_name, hooked, hooked_is_final, final_name):
    calls: list[tuple[torch.Tensor, torch.Tensor]] = []

    def capture(module, hook_inputs, output):
        if hook_inputs:
            calls.append((hook_inputs[0], output))

    handle = hooked.register_forward_hook(capture)
    out_path = Path(config.output_path)
    n = len(inputs)
    feature_dim: int | None = None
    num_classes: int | None = None
    rows_written = 0
    try:
        with out_path.open("w", encoding="utf-8", newline="") as sink:
            with torch.no_grad():
                for start in range(0, n, config.batch_size):
                    batch = inputs[start : start + config.batch_size]
                    calls.clear()
                    output = _check_output(model(batch), len(batch))
                    if not calls:
                        raise ExtractionError(
                            f"batch starting at row {start}: layer {hook_name!r} did not "
                            "run; the model's routing must not change between batches"
                        )
                    feats, hooked_out = calls[-1]
                    if hooked_is_final and not (
                        hooked_out is output or torch.equal(hooked_out, output)
                    ):
                        raise ExtractionError(
                            f"batch starting at row {start}: the model output is no longer "
                            f"produced by layer {final_name!r}; routing must not change "
                            "between batches"
                        )
                    if feats.ndim != 2 or feats.shape[0] != len(batch):
                        raise ExtractionError(
                            f"layer {hook_name!r} received input of shape "
                            f"{tuple(feats.shape)} for a batch of {len(batch)}; need a "
                            "flat (batch, features) tensor"
                        )
                    if feature_dim is None:
                        feature_dim, num_classes = int(feats.shape[1]), int(output.shape[1])
                        _validate_label_range(labels, num_classes)
                        sink.write(_header(num_classes, feature_dim) + "\n")
                    elif feats.shape[1] != feature_dim:
                        raise ExtractionError(
                            f"dimension drift between batches: {feature_dim} features "
                            f"became {feats.shape[1]} at row {start}"
                        )
                    elif output.shape[1] != num_classes:
                        raise ExtractionError(
                            f"dimension drift between batches: {num_classes} classes "
                            f"became {output.shape[1]} at row {start}"
                        )
                    logits64 = output.detach().cpu().double().numpy()
                    feats64 = feats.detach().cpu().double().numpy()
                    _self_check(output, logits64, start)
                    for i in range(len(batch)):
                        label = UNLABELED if labels is None else int(labels[start + i])
                        parts = [str(start + i), str(label)]
                        parts.extend(format_value(v) for v in logits64[i])
                        parts.extend(format_value(v) for v in feats64[i])
                        sink.write(",".join(parts) + "\n")
                        rows_written += 1
    finally:
        handle.remove()

    meta_path = Path(str(out_path) + ".meta.json")
    metadata = {
        "model": type(model).__name__,
        "layer": hook_name or "(root)",
        "feature_dim": feature_dim,
        "num_classes": num_classes,
        "num_rows": rows_written,
    }
    meta_path.write_text(json.dumps(metadata) + "\n", encoding="utf-8")
    return ExtractionResult(
        output_path=out_path,
        metadata_path=meta_path,
        num_rows=rows_written,
        num_classes=num_classes,
        feature_dim=feature_dim,
        layer=hook_name or "(root)",
    )


def _validate_label_range(labels: np.ndarray | None, num_classes: int) -> None:
    if labels is None:
        return
    bad = (labels != UNLABELED) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        row = int(np.argmax(bad))
        raise ExtractionError(
            f"label {int(labels[row])} at row {row} outside [0, {num_classes}) and not -1"
        )
