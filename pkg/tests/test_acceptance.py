"""Acceptance gate: ten end-to-end criteria, one pass/fail line each.

Each test checks a single shipping criterion at its stated tolerance,
using an oracle that shares no code path with the implementation under
test: a pure-python dense solver for the GP posterior, a cached
rejection-sampling estimate for the truncated moments, brute-force scans
for selection and isotonic fits, and a committed synthetic scenario with
frozen measured values for the efficacy criteria.

The reference-scenario simulation is executed once per session through
the command-line entry point and shared by the last three criteria.
"""

import json
import math
import pathlib
import time

import numpy as np
import pytest

from opcal.baselines import (
    apply_isotonic_batch,
    apply_platt_conf_batch,
    fit_isotonic,
    fit_platt_conf,
    fit_platt_logit,
    fit_temperature,
    platt_logit_predictions,
    prediction_changes,
)
from opcal.calibrator import (
    calibrate,
    calibrated_confidences,
    confidence_posterior,
    initialize,
    replay,
    select_next,
)
from opcal.cli import main as cli_main
from opcal.dataset import Dataset, OperationRecord, softmax
from opcal.gp import RbfKernel, fit, posterior, truncated_moments
from opcal.metrics import CostModel, brier_decomposition
from opcal.simulator import SWEEP_CALIBRATORS, SWEEP_HEADER

DATA_DIR = pathlib.Path(__file__).parent / "data"

# Values measured once on the committed scenario (seed 20240605) and
# frozen; reruns must reproduce them bit-for-bit.
REFERENCE_UNCALIBRATED_BRIER = 0.37729547905000793
REFERENCE_GPR_BRIER = 0.16754611549011275
REFERENCE_TEMPERATURE_BRIER = 0.25475759581477236
REFERENCE_PLATT_CONF_BRIER = 0.3159927214556816
REFERENCE_PLATT_LOGIT_BRIER = 0.005368161901291397
REFERENCE_ISOTONIC_BRIER = 0.3188634281621919
TEN_PERCENT_BUDGET = 100


def gauss_solve(a, b):
    """Gaussian elimination with partial pivoting, no numpy.linalg.

    Independent route for cross-checking the Cholesky-based posterior.
    """
    n = len(b)
    m = [[float(a[i][j]) for j in range(n)] + [float(b[i])] for i in range(n)]
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[pivot] = m[pivot], m[col]
        for row in range(col + 1, n):
            factor = m[row][col] / m[col][col]
            for j in range(col, n + 1):
                m[row][j] -= factor * m[col][j]
    x = [0.0] * n
    for row in range(n - 1, -1, -1):
        acc = m[row][n] - sum(m[row][j] * x[j] for j in range(row + 1, n))
        x[row] = acc / m[row][row]
    return x


def binary_dataset(reps, confidences, correct, labeled=False):
    """Two-class records predicting class 0 at the given confidences."""
    records = []
    for i, (rep, c) in enumerate(zip(reps, confidences)):
        logit = math.log(c / (1.0 - c))
        records.append(OperationRecord(
            id=i, representation=np.asarray(rep, dtype=np.float64),
            logits=np.array([logit, 0.0]),
            label=(0 if correct[i] else 1) if labeled else None))
    truth = {i: (0 if ok else 1) for i, ok in enumerate(correct)}
    return Dataset.from_records(records), truth


def blob_problem(seed, n, centers=((0.0, 0.0), (8.0, 0.0), (0.0, 8.0))):
    rng = np.random.default_rng(seed)
    reps, confs, correct = [], [], []
    for i in range(n):
        k = i % len(centers)
        reps.append(rng.normal(size=2) + np.array(centers[k]))
        confs.append(float(rng.uniform(0.55, 0.95)))
        correct.append(bool(rng.uniform() < (0.9 if k == 0 else 0.6)))
    return binary_dataset(reps, confs, correct)


def sampled_multiclass(seed, n, k, generating_temperature, rep_dim=3):
    """Random logits with labels drawn from softmax(h / T_gen)."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=2.0, size=(n, k))
    shifted = logits / generating_temperature
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    draws = rng.uniform(size=n)
    labels = (probs.cumsum(axis=1) < draws[:, None]).sum(axis=1)
    reps = rng.normal(size=(n, rep_dim))
    records = [
        OperationRecord(id=i, representation=reps[i], logits=logits[i],
                        label=int(labels[i]))
        for i in range(n)
    ]
    return Dataset.from_records(records)


def scan_select(state, dataset, lam):
    """Exhaustive argmin of |mu_tn - lambda| / sigma_tn over unlabeled ids."""
    labeled = {rid for c in state.clusters for rid in c.labeled_ids}
    best = None
    for rec in dataset.records:
        if rec.id in labeled:
            continue
        post = confidence_posterior(state, rec)
        if post.std <= 1e-12:
            score = 0.0 if abs(post.mean - lam) <= 1e-12 else math.inf
        else:
            score = abs(post.mean - lam) / post.std
        if best is None or (score, rec.id) < best:
            best = (score, rec.id)
    return best[1]


@pytest.fixture(scope="module")
def reference_simulation(tmp_path_factory):
    """One full command-line sweep on the committed scenario, timed."""
    out = tmp_path_factory.mktemp("acceptance_sweep")
    start = time.perf_counter()
    code = cli_main(["simulate", "--output-dir", str(out)])
    elapsed = time.perf_counter() - start
    assert code == 0
    lines = (out / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == SWEEP_HEADER
    names = lines[0].split(",")
    rows = {}
    for line in lines[1:]:
        cells = line.split(",")
        row = dict(zip(names, cells))
        rows[(int(row["budget"]), row["calibrator"])] = row
    return rows, elapsed


def test_p1_gp_posterior_matches_dense_solve_oracle():
    rng = np.random.default_rng(20240901)
    jitter = 1e-8
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5))
        points = rng.normal(size=(n, d)) * float(rng.uniform(0.5, 3.0))
        targets = rng.uniform(-1.0, 1.0, size=n)
        ell = float(rng.uniform(0.3, 3.0))
        query = rng.normal(size=d) * 2.0
        if n > 1:
            # keep the kernel matrix well conditioned: with near-duplicate
            # points both routes solve an almost-singular system and the
            # achievable agreement is set by conditioning, not by either
            # algorithm, so spread the points relative to the length scale
            gaps = [float(np.linalg.norm(points[i] - points[j]))
                    for i in range(n) for j in range(i + 1, n)]
            closest = min(gaps)
            if closest < 0.5 * ell:
                points = points * (0.5 * ell / max(closest, 1e-12))

        def kval(a, b):
            d2 = float(np.sum((np.asarray(a) - np.asarray(b)) ** 2))
            return math.exp(-d2 / (2.0 * ell ** 2))

        gram = [[kval(points[i], points[j]) + (jitter if i == j else 0.0)
                 for j in range(n)] for i in range(n)]
        kstar = [kval(points[i], query) for i in range(n)]
        weights = gauss_solve(gram, list(targets))
        expected_mean = sum(k * w for k, w in zip(kstar, weights))
        solved = gauss_solve(gram, kstar)
        expected_var = 1.0 - sum(k * s for k, s in zip(kstar, solved))

        model = fit(points, targets, RbfKernel(length_scale=ell),
                    jitter=jitter)
        mean, std = posterior(model, query)
        assert abs(mean - expected_mean) <= 1e-10
        assert abs(std ** 2 - expected_var) <= 1e-10
    assert time.perf_counter() - start < 5.0


def test_p2_truncated_moments_match_monte_carlo_oracle():
    payload = json.loads(
        (DATA_DIR / "truncated_moment_oracle.json").read_text(encoding="utf-8"))
    assert payload["samples"] == 10_000_000
    assert len(payload["cases"]) == 50
    start = time.perf_counter()
    for case in payload["cases"]:
        post = truncated_moments(case["base_confidence"], case["gp_mean"],
                                 case["gp_std"])
        assert abs(post.mean - case["mc_mean"]) <= 3.0 * case["se_mean"], case
        assert abs(post.std - case["mc_std"]) <= 3.0 * case["se_std"], case
    for sigma in (0.05, 0.2, 1.0, 3.0):
        assert abs(truncated_moments(0.5, 0.0, sigma).mean - 0.5) <= 1e-12
    assert time.perf_counter() - start < 1.0


def test_p3_brier_decomposition_identity():
    rng = np.random.default_rng(20240902)
    bins = 10
    for trial in range(100):
        n = int(rng.integers(5, 400))
        confidences = rng.uniform(size=n)
        if trial % 2 == 0:
            correctness = (rng.uniform(size=n) < confidences).astype(float)
        else:
            correctness = rng.integers(0, 2, size=n).astype(float)
        rel, res, unc = brier_decomposition(confidences, correctness, bins)

        idx = np.clip(np.ceil(confidences * bins).astype(int) - 1, 0, bins - 1)
        binned = np.empty_like(confidences)
        for m in range(bins):
            mask = idx == m
            if mask.any():
                binned[mask] = confidences[mask].mean()
        bs_binmeans = float(np.mean((correctness - binned) ** 2))
        assert abs(bs_binmeans - (rel - res + unc)) <= 1e-12


def test_p4_calibration_preserves_predictions():
    for seed in (61, 62, 63):
        dataset = sampled_multiclass(seed, n=400, k=3,
                                     generating_temperature=1.5)
        original = dataset.predicted_classes.copy()

        t_model = fit_temperature(dataset)
        rescaled_argmax = np.argmax(dataset.logit_matrix / t_model.temperature,
                                    axis=1)
        assert np.array_equal(rescaled_argmax, original)

        conf_map = apply_platt_conf_batch(fit_platt_conf(dataset), dataset)
        iso_map = apply_isotonic_batch(fit_isotonic(dataset), dataset)
        assert conf_map.shape == original.shape
        assert iso_map.shape == original.shape

        labels = {rec.id: rec.label for rec in dataset.records}
        state = calibrate(dataset, budget=30, oracle=labels.__getitem__,
                          num_clusters=4, cost=CostModel.from_threshold(0.8),
                          seed=0)
        gpr_map = calibrated_confidences(state, dataset)
        assert gpr_map.shape == original.shape
        assert np.all((gpr_map >= 0.0) & (gpr_map <= 1.0))

        # none of the four conservative calibrators touched the predictions
        assert np.array_equal(dataset.predicted_classes, original)

        # the logit remapper may move predictions but must count the moves
        pl_model = fit_platt_logit(dataset)
        remapped = platt_logit_predictions(pl_model, dataset)
        assert prediction_changes(pl_model, dataset) == int(
            np.sum(remapped != original))


def test_p5_selection_matches_brute_force_scan():
    rng = np.random.default_rng(20240904)
    checked = 0
    for _ in range(48):
        n = int(rng.integers(24, 61))
        num_clusters = int(rng.integers(2, 5))
        budget = num_clusters + int(rng.integers(5, 16))
        lam = float(rng.choice([0.6, 0.75, 0.8, 0.9]))
        cost = CostModel.from_threshold(lam)
        dataset, truth = blob_problem(int(rng.integers(0, 10_000)), n)
        full = calibrate(dataset, budget=budget, oracle=truth.__getitem__,
                         num_clusters=num_clusters, cost=cost, seed=1)
        prefix = int(rng.integers(num_clusters, budget))
        state = replay(dataset, num_clusters, cost, 1,
                       full.labeled_pairs()[:prefix], budget=budget)
        assert select_next(state, dataset) == scan_select(state, dataset, lam)
        checked += 1

    # exact tie between duplicated records: the lower id must win
    dataset, truth = binary_dataset(
        [[0.0], [1.0], [3.0], [3.0]], [0.8, 0.7, 0.6, 0.6],
        [True, True, True, True])
    state = initialize(dataset, 1, 3, CostModel.from_threshold(0.5), 0,
                       truth.__getitem__)
    tied_a = confidence_posterior(state, dataset.record(2))
    tied_b = confidence_posterior(state, dataset.record(3))
    assert tied_a.mean == tied_b.mean and tied_a.std == tied_b.std
    assert select_next(state, dataset) == scan_select(state, dataset, 0.5) == 2
    checked += 1

    # a record duplicating a labeled medoid but carrying higher base
    # confidence gets a posterior whose [0,1] mass vanishes: sigma_tn = 0
    dataset, truth = binary_dataset(
        [[0.0, 0.0], [0.0, 0.0], [1.2, 0.0], [5.0, 5.0]],
        [0.5, 0.7, 0.6, 0.8], [True, True, True, False])
    with pytest.warns(UserWarning):  # the singleton cluster falls back to 1.0
        state = initialize(dataset, 2, 4, CostModel.from_threshold(0.8), 0,
                           truth.__getitem__)
    degenerate = confidence_posterior(state, dataset.record(1))
    assert degenerate.std == 0.0
    assert select_next(state, dataset) == scan_select(state, dataset, 0.8)
    checked += 1
    assert checked == 50


def test_p6_reference_scenario_efficacy(reference_simulation):
    rows, _ = reference_simulation
    uncalibrated = float(rows[(0, "gpr")]["brier"])
    brier = {name: float(rows[(TEN_PERCENT_BUDGET, name)]["brier"])
             for name in SWEEP_CALIBRATORS}

    assert uncalibrated == pytest.approx(REFERENCE_UNCALIBRATED_BRIER, abs=1e-9)
    assert brier["gpr"] == pytest.approx(REFERENCE_GPR_BRIER, abs=1e-9)
    assert brier["temperature"] == pytest.approx(
        REFERENCE_TEMPERATURE_BRIER, abs=1e-9)
    assert brier["platt_conf"] == pytest.approx(
        REFERENCE_PLATT_CONF_BRIER, abs=1e-9)
    assert brier["platt_logit"] == pytest.approx(
        REFERENCE_PLATT_LOGIT_BRIER, abs=1e-9)
    assert brier["isotonic"] == pytest.approx(REFERENCE_ISOTONIC_BRIER, abs=1e-9)

    assert brier["gpr"] <= 0.85 * uncalibrated
    assert brier["gpr"] <= brier["temperature"]
    assert brier["gpr"] <= brier["platt_conf"]
    assert brier["gpr"] <= brier["isotonic"]
    assert brier["gpr"] <= brier["platt_logit"], (
        "known shortfall, kept red on purpose: the scenario's shared-shift "
        "drift makes the true operation-domain confidence an exact softmax "
        "of affinely remapped logits, so the logit remapper can drive its "
        "Brier near zero, while the cluster GP's posterior spread is "
        "floored by the median-heuristic length scale in this concentrated "
        "8-dimensional geometry; the README's testing section carries the "
        "full analysis")


def test_p7_high_confidence_false_count_halved(reference_simulation):
    rows, _ = reference_simulation
    uncalibrated = float(rows[(0, "gpr")]["hc_false_09"])
    after = float(rows[(TEN_PERCENT_BUDGET, "gpr")]["hc_false_09"])
    assert uncalibrated == 370
    assert after <= 0.5 * uncalibrated


def test_p8_simulation_runtime_envelope(reference_simulation):
    rows, elapsed = reference_simulation
    assert len(rows) == 5 * 5
    assert elapsed < 60.0


def test_p9_isotonic_matches_pooled_means_oracle():
    rng = np.random.default_rng(20240905)
    for trial in range(200):
        n = int(rng.integers(2, 61))
        confidences = rng.uniform(0.51, 0.99, size=n)
        if trial % 3 == 0:
            confidences = np.round(confidences, 2)  # force ties
        correct = rng.uniform(size=n) < float(rng.uniform(0.3, 0.9))
        dataset, _ = binary_dataset([[float(i)] for i in range(n)],
                                    confidences, correct, labeled=True)
        model = fit_isotonic(dataset)

        # oracle: sort, pool exact ties, then merge adjacent mean
        # violations until none remain (the fixed point is unique)
        order = np.argsort(dataset.confidences, kind="stable")
        blocks = []
        for c, y in zip(dataset.confidences[order],
                        dataset.correctness()[order]):
            if blocks and blocks[-1][0][-1] == c:
                blocks[-1][0].append(c)
                blocks[-1][1].append(y)
            else:
                blocks.append(([c], [y]))
        while True:
            means = [sum(ys) / len(ys) for _, ys in blocks]
            bad = next((i for i in range(len(blocks) - 1)
                        if means[i] > means[i + 1]), None)
            if bad is None:
                break
            merged = (blocks[bad][0] + blocks[bad + 1][0],
                      blocks[bad][1] + blocks[bad + 1][1])
            blocks[bad:bad + 2] = [merged]
        expected = {}
        for cs, ys in blocks:
            mean = sum(ys) / len(ys)
            for c in cs:
                expected[float(c)] = mean

        assert len(model.breakpoints) == len(set(map(float, confidences)))
        for c, v in zip(model.breakpoints, model.values):
            assert abs(v - expected[float(c)]) <= 1e-10
        assert np.all(np.diff(model.values) >= -1e-15)


def test_p10_temperature_recovery():
    for true_temperature, seed in ((0.5, 501), (1.0, 502), (2.0, 503)):
        dataset = sampled_multiclass(seed, n=10_000, k=3,
                                     generating_temperature=true_temperature)
        model = fit_temperature(dataset)
        assert abs(model.temperature - true_temperature) <= 0.1
