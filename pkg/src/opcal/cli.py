"""Command-line interface for the calibration toolkit.

Subcommands:
  validate   check a dataset CSV's format, dimensions, and label coverage
  calibrate  run budgeted active calibration against the input's labels
  evaluate   score a confidence function on a fully labeled dataset
  baseline   fit one of the reference calibrators and apply it
  simulate   run the synthetic budget sweep and write its CSV

A sidecar config file at `<input>.config` supplies `key = value` defaults
for clusters, budget, lambda, loss_u, bins, seed, and calibrator; flags
take precedence. Exit codes: 0 success, 1 validation or user error, 2
internal numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import (
    CALIBRATOR_NAMES,
    apply_isotonic_batch,
    apply_platt_conf_batch,
    apply_platt_logit_batch,
    apply_temperature_batch,
    fit_isotonic,
    fit_platt_conf,
    fit_platt_logit,
    fit_temperature,
    write_model,
)
from .calibrator import calibrate, calibrated_confidences, save_state, write_trace
from .clustering import default_cluster_count
from .dataset import Dataset, format_float, read_dataset, read_sidecar_config
from .errors import NumericalError, ValidationError
from .metrics import DEFAULT_NUM_BINS, CalibrationReport, CostModel
from .simulator import (
    SWEEP_CALIBRATORS,
    averaged_sweep,
    reference_scenario,
    run_sweep,
    write_sweep,
)

DEFAULT_THRESHOLD = 0.8
DEFAULT_SIMULATE_BUDGETS = (0, 25, 50, 100, 200)
CALIBRATED_HEADER = "id,predicted_class,original_confidence,calibrated_confidence"

_SIDECAR_KEYS = ("clusters", "budget", "lambda", "loss_u", "bins", "seed",
                 "calibrator")

_BASELINE_FITTERS = {
    "temperature": (fit_temperature, apply_temperature_batch),
    "platt_conf": (fit_platt_conf, apply_platt_conf_batch),
    "platt_logit": (fit_platt_logit, apply_platt_logit_batch),
    "isotonic": (fit_isotonic, apply_isotonic_batch),
}


@dataclass
class CliConfig:
    """Resolved options for one subcommand invocation."""

    subcommand: str
    input: Optional[Path] = None
    output_dir: Path = Path(".")
    clusters: Optional[int] = None
    budget: Optional[int] = None
    threshold_lambda: Optional[float] = None
    loss_u: Optional[float] = None
    bins: int = DEFAULT_NUM_BINS
    seed: Optional[int] = None
    calibrator: Optional[str] = None
    calibrated: Optional[Path] = None
    budgets: Optional[tuple[int, ...]] = None
    repeats: int = 1

    def __post_init__(self):
        if self.threshold_lambda is not None and self.loss_u is not None:
            raise ValidationError(
                "give exactly one of --lambda and --loss-u; the other is "
                "derived via lambda = u / (1 + u)")
        if self.bins < 1:
            raise ValidationError(f"need at least one bin, got {self.bins}")
        if self.repeats < 1:
            raise ValidationError(f"repeats must be >= 1, got {self.repeats}")

    def cost_model(self) -> CostModel:
        if self.loss_u is not None:
            return CostModel.from_loss(self.loss_u)
        if self.threshold_lambda is not None:
            return CostModel.from_threshold(self.threshold_lambda)
        return CostModel.from_threshold(DEFAULT_THRESHOLD)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ValidationError (exit 1)."""

    def error(self, message):
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="opcal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in ("validate", "calibrate", "evaluate", "baseline", "simulate"):
        p = sub.add_parser(name)
        p.add_argument("--input", type=Path)
        p.add_argument("--output-dir", type=Path, default=None)
        p.add_argument("--clusters", type=int)
        p.add_argument("--budget", type=int)
        p.add_argument("--loss-u", dest="loss_u", type=float)
        p.add_argument("--lambda", dest="threshold_lambda", type=float)
        p.add_argument("--bins", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--calibrator", type=str)
        if name == "evaluate":
            p.add_argument("--calibrated", type=Path)
        if name == "simulate":
            p.add_argument("--budgets", type=str)
            p.add_argument("--repeats", type=int, default=1)
    return parser


def _sidecar_overrides(input_path: Optional[Path]) -> dict[str, str]:
    if input_path is None:
        return {}
    sidecar = Path(str(input_path) + ".config")
    if not sidecar.exists():
        return {}
    values = read_sidecar_config(sidecar)
    unknown = sorted(set(values) - set(_SIDECAR_KEYS))
    if unknown:
        raise ValidationError(
            f"{sidecar}: unknown config keys {unknown}; "
            f"valid: {list(_SIDECAR_KEYS)}")
    return values


def _parse_number(sidecar: dict[str, str], key: str, cast, description: str):
    try:
        return cast(sidecar[key])
    except ValueError:
        raise ValidationError(
            f"sidecar {key} = {sidecar[key]!r} is not {description}") from None


def resolve_config(argv: Sequence[str]) -> CliConfig:
    """Parse flags, then fill unset options from the input's sidecar file."""
    space = _build_parser().parse_args(argv)
    sidecar = _sidecar_overrides(space.input)

    def fill(flag_value, key: str, cast, description: str):
        if flag_value is not None or key not in sidecar:
            return flag_value
        return _parse_number(sidecar, key, cast, description)

    threshold_lambda = space.threshold_lambda
    loss_u = space.loss_u
    if threshold_lambda is None and loss_u is None:
        threshold_lambda = fill(None, "lambda", float, "a number")
        loss_u = fill(None, "loss_u", float, "a number")
        if threshold_lambda is not None and loss_u is not None:
            raise ValidationError(
                "sidecar config gives both lambda and loss_u; keep one")
    bins = fill(space.bins, "bins", int, "an integer")
    return CliConfig(
        subcommand=space.subcommand,
        input=space.input,
        output_dir=space.output_dir if space.output_dir is not None else Path("."),
        clusters=fill(space.clusters, "clusters", int, "an integer"),
        budget=fill(space.budget, "budget", int, "an integer"),
        threshold_lambda=threshold_lambda,
        loss_u=loss_u,
        bins=bins if bins is not None else DEFAULT_NUM_BINS,
        seed=fill(space.seed, "seed", int, "an integer"),
        calibrator=space.calibrator if space.calibrator is not None
        else sidecar.get("calibrator"),
        calibrated=getattr(space, "calibrated", None),
        budgets=_parse_budget_list(space.budgets)
        if getattr(space, "budgets", None) is not None else None,
        repeats=getattr(space, "repeats", 1),
    )


def _parse_budget_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValidationError(
            f"--budgets must be comma-separated integers, got {text!r}") from None


def _require_input(config: CliConfig) -> Path:
    if config.input is None:
        raise ValidationError(f"{config.subcommand} requires --input")
    if not config.input.exists():
        raise ValidationError(f"input file not found: {config.input}")
    return config.input


def _fully_labeled(dataset: Dataset, purpose: str) -> None:
    missing = [rec.id for rec in dataset.records if rec.label is None]
    if missing:
        raise ValidationError(
            f"{purpose} needs labels on every record; "
            f"{len(missing)} missing (first: record {missing[0]})")


def _write_calibrated_csv(path: Path, dataset: Dataset,
                          calibrated: np.ndarray) -> None:
    lines = [CALIBRATED_HEADER]
    for rec, original, value in zip(dataset.records, dataset.confidences,
                                    calibrated):
        predicted = int(np.argmax(rec.logits))
        lines.append(f"{rec.id},{predicted},{format_float(original)},"
                     f"{format_float(value)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_calibrated_csv(path: Path) -> dict[int, float]:
    """Parse a calibrated-confidence CSV into an id -> confidence map."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CALIBRATED_HEADER:
        raise ValidationError(
            f"{path}: expected header {CALIBRATED_HEADER!r}")
    values: dict[int, float] = {}
    for line_num, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 4:
            raise ValidationError(f"{path} line {line_num}: expected 4 cells")
        try:
            record_id = int(cells[0])
            confidence = float(cells[3])
        except ValueError:
            raise ValidationError(
                f"{path} line {line_num}: malformed row") from None
        if record_id in values:
            raise ValidationError(
                f"{path} line {line_num}: duplicate id {record_id}")
        if not 0.0 <= confidence <= 1.0:
            raise ValidationError(
                f"{path} line {line_num}: confidence {confidence} "
                f"outside [0, 1]")
        values[record_id] = confidence
    return values


def _ensure_output_dir(config: CliConfig) -> Path:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return config.output_dir


def cmd_validate(config: CliConfig) -> None:
    dataset = read_dataset(_require_input(config))
    labeled = sum(1 for rec in dataset.records if rec.label is not None)
    print(f"valid: {len(dataset.records)} records, "
          f"{dataset.num_classes} classes, {dataset.feature_dim} features, "
          f"{labeled} labeled")


def cmd_calibrate(config: CliConfig) -> None:
    dataset = read_dataset(_require_input(config))
    _fully_labeled(dataset, "calibrate (the label column is the oracle)")
    n = len(dataset.records)
    clusters = config.clusters if config.clusters is not None \
        else default_cluster_count(n)
    budget = config.budget if config.budget is not None \
        else max(clusters, round(0.1 * n))
    labels = {rec.id: rec.label for rec in dataset.records}
    seed = config.seed if config.seed is not None else 0
    state = calibrate(dataset, budget=budget, oracle=labels.__getitem__,
                      num_clusters=clusters, cost=config.cost_model(),
                      seed=seed)
    out = _ensure_output_dir(config)
    _write_calibrated_csv(out / "calibrated.csv", dataset,
                          calibrated_confidences(state, dataset))
    write_trace(out / "trace.csv", state.trace)
    save_state(out / "state.json", state)
    print(f"calibrated {n} records with {state.labels_used} labels in "
          f"{len(state.clusters)} clusters; wrote calibrated.csv, "
          f"trace.csv, state.json to {out}")


def cmd_evaluate(config: CliConfig) -> None:
    dataset = read_dataset(_require_input(config))
    _fully_labeled(dataset, "evaluate")
    correctness = dataset.correctness()
    if config.calibrated is not None:
        if not config.calibrated.exists():
            raise ValidationError(
                f"calibrated file not found: {config.calibrated}")
        values = read_calibrated_csv(config.calibrated)
        missing = [rec.id for rec in dataset.records if rec.id not in values]
        if missing:
            raise ValidationError(
                f"calibrated file lacks ids present in the dataset "
                f"(first: record {missing[0]})")
        confidences = np.array([values[rec.id] for rec in dataset.records])
    else:
        confidences = dataset.confidences
    report = CalibrationReport.evaluate(confidences, correctness,
                                        config.cost_model(), config.bins)
    out = _ensure_output_dir(config)
    (out / "report.csv").write_text(
        report.csv_header() + "\n" + report.to_csv_row() + "\n",
        encoding="utf-8")
    print(report.to_text(), end="")


def cmd_baseline(config: CliConfig) -> None:
    name = config.calibrator
    if name not in CALIBRATOR_NAMES:
        raise ValidationError(
            f"unknown calibrator {name!r}; valid names: "
            f"{', '.join(CALIBRATOR_NAMES)}")
    dataset = read_dataset(_require_input(config))
    _fully_labeled(dataset, "baseline fitting")
    fitter, applier = _BASELINE_FITTERS[name]
    model = fitter(dataset)
    out = _ensure_output_dir(config)
    model_path = out / f"{name}_model.txt"
    write_model(model_path, model)
    _write_calibrated_csv(out / "calibrated.csv", dataset,
                          applier(model, dataset))
    print(f"fitted {name} on {len(dataset.records)} records; wrote "
          f"{model_path.name} and calibrated.csv to {out}")


def _split_for_sweep(dataset: Dataset) -> tuple[Dataset, Dataset]:
    n = len(dataset.records)
    if n < 4:
        raise ValidationError(f"need at least 4 records to sweep, got {n}")
    half = n // 2
    return (Dataset.from_records(dataset.records[:half]),
            Dataset.from_records(dataset.records[half:]))


def cmd_simulate(config: CliConfig) -> None:
    budgets = list(config.budgets) if config.budgets is not None \
        else list(DEFAULT_SIMULATE_BUDGETS)
    if config.calibrator is not None:
        if config.calibrator not in SWEEP_CALIBRATORS:
            raise ValidationError(
                f"unknown calibrator {config.calibrator!r}; valid names: "
                f"{', '.join(SWEEP_CALIBRATORS)}")
        calibrators = (config.calibrator,)
    else:
        calibrators = SWEEP_CALIBRATORS
    cost = config.cost_model()
    if config.input is not None:
        if config.repeats != 1:
            raise ValidationError(
                "--repeats applies only to generated scenarios")
        dataset = read_dataset(_require_input(config))
        _fully_labeled(dataset, "simulate on a recorded dataset")
        calibration, test = _split_for_sweep(dataset)
        labels = {rec.id: rec.label for rec in calibration.records}
        result = run_sweep(
            calibration, test, labels.__getitem__, test.labels(), budgets,
            calibrators, cost=cost, num_clusters=config.clusters,
            seed=config.seed if config.seed is not None else 0,
            num_bins=config.bins)
    else:
        scenario = reference_scenario()
        if config.seed is not None:
            scenario = replace(scenario, seed=config.seed)
        result = averaged_sweep(scenario, budgets, calibrators, cost=cost,
                                repeats=config.repeats,
                                num_clusters=config.clusters,
                                num_bins=config.bins)
    out = _ensure_output_dir(config)
    write_sweep(out / "sweep.csv", result)
    print(f"wrote {len(result.rows)} sweep rows "
          f"({len(budgets)} budgets x {len(calibrators)} calibrators) "
          f"to {out / 'sweep.csv'}")


_HANDLERS = {
    "validate": cmd_validate,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "simulate": cmd_simulate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        config = resolve_config(sys.argv[1:] if argv is None else list(argv))
        _HANDLERS[config.subcommand](config)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
