"""Operational confidence calibration toolkit.

Calibrates per-input prediction confidence of an already-trained classifier
for a shifted operation domain: per-cluster Gaussian Process regression over
the model's representation space, a truncated-normal posterior as the
calibrated confidence, and cost-sensitive active selection of which inputs
to label. Ships the evaluation metrics, baseline calibrators, and a
synthetic-scenario simulator used for comparisons.

The most common entry points are re-exported here; the submodules hold the
full surface (`opcal.gp`, `opcal.clustering`, `opcal.calibrator`,
`opcal.baselines`, `opcal.metrics`, `opcal.simulator`, `opcal.dataset`,
`opcal.cli`).
"""

from .baselines import (
    CALIBRATOR_NAMES,
    fit_isotonic,
    fit_platt_conf,
    fit_platt_logit,
    fit_temperature,
)
from .calibrator import (
    CalibratorState,
    calibrate,
    calibrated_confidences,
    load_state,
    replay,
    save_state,
    select_next,
)
from .dataset import Dataset, OperationRecord, read_dataset, write_dataset
from .errors import NumericalError, OpcalError, ValidationError
from .metrics import (
    CalibrationReport,
    CostModel,
    brier_decomposition,
    brier_score,
    high_confidence_counts,
    lce,
)
from .simulator import (
    SyntheticScenario,
    generate_scenario,
    reference_scenario,
    run_sweep,
    sweep_scenario,
)

__all__ = [
    "OpcalError",
    "ValidationError",
    "NumericalError",
    "Dataset",
    "OperationRecord",
    "read_dataset",
    "write_dataset",
    "CalibratorState",
    "calibrate",
    "calibrated_confidences",
    "select_next",
    "replay",
    "save_state",
    "load_state",
    "CALIBRATOR_NAMES",
    "fit_temperature",
    "fit_platt_conf",
    "fit_platt_logit",
    "fit_isotonic",
    "CostModel",
    "CalibrationReport",
    "brier_score",
    "brier_decomposition",
    "lce",
    "high_confidence_counts",
    "SyntheticScenario",
    "generate_scenario",
    "reference_scenario",
    "run_sweep",
    "sweep_scenario",
]
__version__ = "0.1.0"
