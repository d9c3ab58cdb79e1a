import numpy as np
import pytest

from opcal.errors import ValidationError
from opcal.metrics import (
    CalibrationReport,
    CostModel,
    bin_index,
    brier_decomposition,
    brier_score,
    high_confidence_counts,
    lce,
)


def binned_brier_oracle(conf, correct, num_bins):
    """Independent bin-mean substitution + plain mean of squares."""
    conf = np.asarray(conf, dtype=float)
    idx = bin_index(conf, num_bins)
    sub = conf.copy()
    for m in np.unique(idx):
        sub[idx == m] = conf[idx == m].mean()
    return float(np.mean((np.asarray(correct, dtype=float) - sub) ** 2))


class TestCostModel:
    def test_from_loss(self):
        cm = CostModel.from_loss(4.0)
        assert cm.threshold_lambda == pytest.approx(0.8, abs=1e-15)

    def test_from_threshold(self):
        cm = CostModel.from_threshold(0.8)
        assert cm.loss_u == pytest.approx(4.0, abs=1e-12)

    def test_inconsistent_pair_rejected(self):
        with pytest.raises(ValidationError):
            CostModel(loss_u=4.0, threshold_lambda=0.7)

    def test_bad_values(self):
        with pytest.raises(ValidationError):
            CostModel.from_loss(0.0)
        with pytest.raises(ValidationError):
            CostModel.from_threshold(1.0)


class TestBrierScore:
    def test_perfect_confidence(self):
        assert brier_score([1.0, 0.0, 1.0], [1, 0, 1]) == 0.0

    def test_half_half(self):
        assert brier_score([0.5, 0.5], [1, 0]) == 0.25

    def test_hand_sum(self):
        # (0.01 + 0.04 + 0.49) / 3
        assert brier_score([0.9, 0.2, 0.7], [1, 0, 0]) == pytest.approx(0.18, abs=1e-15)

    def test_range_and_zero_iff_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = rng.integers(1, 40)
            c = rng.uniform(size=n)
            i = rng.integers(0, 2, size=n)
            bs = brier_score(c, i)
            assert 0.0 <= bs <= 1.0
            assert (bs == 0.0) == bool(np.all(c == i))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            brier_score([0.5], [1, 0])

    def test_empty(self):
        with pytest.raises(ValidationError):
            brier_score([], [])


class TestDecomposition:
    def test_degenerate_single_bin(self):
        # Constant confidence equal to accuracy: only uncertainty survives.
        i = np.array([1, 1, 0, 1])
        acc = i.mean()
        rel, res, unc = brier_decomposition(np.full(4, acc), i, num_bins=1)
        assert rel == pytest.approx(0.0, abs=1e-15)
        assert res == pytest.approx(0.0, abs=1e-15)
        assert unc == pytest.approx(acc * (1 - acc), abs=1e-15)

    def test_two_bin_hand_computation(self):
        c = [0.95, 0.95, 0.05, 0.05]
        i = [1, 1, 0, 0]
        rel, res, unc = brier_decomposition(c, i, num_bins=10)
        assert rel == pytest.approx(0.5 * 0.05 ** 2 + 0.5 * 0.05 ** 2, abs=1e-12)
        assert rel == pytest.approx(0.0025, abs=1e-12)
        assert res == pytest.approx(0.25, abs=1e-12)
        assert unc == pytest.approx(0.25, abs=1e-12)

    def test_identity_on_random_inputs(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = rng.integers(1, 200)
            c = rng.uniform(size=n)
            i = rng.integers(0, 2, size=n)
            rel, res, unc = brier_decomposition(c, i, num_bins=10)
            assert abs(binned_brier_oracle(c, i, 10) - (rel - res + unc)) <= 1e-12

    def test_zero_confidence_lands_in_first_bin(self):
        idx = bin_index(np.array([0.0, 1e-12, 0.1, 0.10000000001, 1.0]), 10)
        np.testing.assert_array_equal(idx, [0, 0, 0, 1, 9])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            brier_decomposition([], [], num_bins=10)


class TestLce:
    def test_perfect_confidence_zero(self):
        for u in (0.5, 1.0, 4.0, 9.0):
            cm = CostModel.from_loss(u)
            assert lce([1.0, 0.0, 1.0], [1, 0, 1], cm) == 0.0

    def test_single_confident_error(self):
        cm = CostModel.from_loss(4.0)
        assert lce([1.0], [0], cm) == pytest.approx(4.0, abs=1e-15)

    def test_hand_evaluation(self):
        # G_D = 2; gains: 1 (act, correct), -4 (act, false), 0 (skip) => (2 - (-3)) / 3
        cm = CostModel.from_loss(4.0)
        assert lce([0.9, 0.9, 0.3], [1, 0, 1], cm) == pytest.approx(5.0 / 3.0, abs=1e-15)

    def test_threshold_boundary_acts(self):
        cm = CostModel.from_loss(4.0)
        # Exactly at the threshold: act.
        assert lce([0.8], [1], cm) == 0.0

    def test_monotonicity_across_threshold(self):
        cm = CostModel.from_loss(4.0)
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            c = rng.uniform(size=n)
            i = rng.integers(0, 2, size=n).astype(float)
            base = lce(c, i, cm)
            j = int(rng.integers(0, n))
            raised = c.copy()
            raised[j] = 1.0
            moved = lce(raised, i, cm)
            if i[j] == 1.0:
                assert moved <= base + 1e-12
            else:
                assert moved >= base - 1e-12


class TestHighConfidenceCounts:
    def test_at_09(self):
        assert high_confidence_counts([0.95, 0.85, 0.5], [1, 0, 0], 0.9) == (1, 0)

    def test_at_08(self):
        assert high_confidence_counts([0.95, 0.85, 0.5], [1, 0, 0], 0.8) == (1, 1)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            high_confidence_counts([], [], 0.9)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(31)
        c = rng.uniform(size=100)
        i = rng.integers(0, 2, size=100)
        prev = None
        for lam in np.linspace(0.05, 1.0, 20):
            cur = high_confidence_counts(c, i, lam)
            if prev is not None:
                assert cur[0] <= prev[0] and cur[1] <= prev[1]
            prev = cur


class TestReport:
    def test_report_identity_and_serialization(self):
        rng = np.random.default_rng(41)
        c = rng.uniform(size=50)
        i = rng.integers(0, 2, size=50)
        cm = CostModel.from_loss(4.0)
        rep = CalibrationReport.evaluate(c, i, cm)
        assert abs(binned_brier_oracle(c, i, 10)
                   - (rep.reliability - rep.resolution + rep.uncertainty)) <= 1e-12
        acc = i.mean()
        assert rep.uncertainty == pytest.approx(acc * (1 - acc), abs=1e-15)
        text = rep.to_text()
        assert "brier = " in text and "lce = " in text
        header, row = rep.csv_header(), rep.to_csv_row()
        assert len(header.split(",")) == len(row.split(","))
