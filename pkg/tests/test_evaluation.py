import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbw3d.evaluation import (
    compute_metrics,
    format_table,
    hadlock_efw,
    intergrowth_efw,
    load_coefficients,
)


class TestComputeMetrics:
    def test_perfect_predictions(self):
        r = compute_metrics([3000.0, 2500.0], [3000.0, 2500.0])
        assert r.mae_g == r.rmse_g == r.mape_pct == 0.0

    def test_single_case(self):
        r = compute_metrics([3100.0], [3229.3])
        assert r.mae_g == pytest.approx(129.3)
        assert r.mape_pct == pytest.approx(129.3 / 3229.3 * 100, abs=0.05)
        assert r.n_cases == 1

    def test_hand_arithmetic(self):
        r = compute_metrics([1.0, 3.0], [2.0, 2.0])
        assert r.mae_g == 1.0
        assert r.rmse_g == 1.0
        assert r.mape_pct == 50.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(2000, 4000, 10)
        true = rng.uniform(2000, 4000, 10)
        perm = rng.permutation(10)
        a, b = compute_metrics(pred, true), compute_metrics(pred[perm], true[perm])
        assert a == b

    @given(st.lists(st.tuples(
        st.floats(1000, 5000), st.floats(1000, 5000)), min_size=1, max_size=20))
    def test_rmse_at_least_mae(self, pairs):
        pred = [p for p, _ in pairs]
        true = [t for _, t in pairs]
        r = compute_metrics(pred, true)
        assert r.rmse_g >= r.mae_g - 1e-9

    def test_nonpositive_truth_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics([1.0], [0.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics([1.0, 2.0], [1.0])


# direct-evaluation oracle points, in mm
HADLOCK_POINTS = [
    (330.0, 350.0, 70.0, 85.0),
    (310.0, 320.0, 65.0, 80.0),
    (290.0, 300.0, 60.0, 75.0),
]

INTERGROWTH_POINTS = [
    (330.0, 350.0),
    (310.0, 320.0),
    (290.0, 300.0),
]


def hadlock_oracle(hc_mm, ac_mm, fl_mm, bpd_mm):
    hc, ac, fl, bpd = hc_mm / 10, ac_mm / 10, fl_mm / 10, bpd_mm / 10
    log10_efw = (
        1.3596
        + 0.0064 * hc
        + 0.0424 * ac
        + 0.174 * fl
        + 0.00061 * bpd * ac
        - 0.00386 * ac * fl
    )
    return 10.0**log10_efw


def intergrowth_oracle(hc_mm, ac_mm):
    hc, ac = hc_mm / 1000.0, ac_mm / 1000.0
    return math.exp(
        5.08482
        - 54.06633 * ac**3
        - 95.80076 * ac**3 * math.log(ac)
        + 3.13637 * hc
    )


class TestHadlock:
    @pytest.mark.parametrize("point", HADLOCK_POINTS)
    def test_matches_direct_evaluation(self, point):
        assert hadlock_efw(*point) == pytest.approx(hadlock_oracle(*point), abs=1.0)

    def test_plausible_magnitude(self):
        assert 2500 < hadlock_efw(330, 350, 70, 85) < 4000

    def test_log_linear_structure(self):
        import copy

        coeffs = load_coefficients()
        shifted = copy.deepcopy(coeffs)
        shifted["hadlock"]["variants"]["hc_ac_fl_bpd"]["intercept"] += math.log10(2.0)
        base = hadlock_efw(330, 350, 70, 85, coeffs)
        doubled = hadlock_efw(330, 350, 70, 85, shifted)
        assert doubled == pytest.approx(2 * base, rel=1e-12)

    def test_variant_selection(self):
        ac_fl = hadlock_efw(330, 350, 70, 85, variant="ac_fl")
        full = hadlock_efw(330, 350, 70, 85, variant="hc_ac_fl_bpd")
        assert ac_fl != full
        assert 2000 < ac_fl < 4500

    def test_unknown_variant(self):
        with pytest.raises(KeyError, match="variant"):
            hadlock_efw(330, 350, 70, 85, variant="nope")

    def test_nonpositive_input(self):
        with pytest.raises(ValueError):
            hadlock_efw(0, 350, 70, 85)


class TestIntergrowth:
    @pytest.mark.parametrize("point", INTERGROWTH_POINTS)
    def test_matches_direct_evaluation(self, point):
        assert intergrowth_efw(*point) == pytest.approx(
            intergrowth_oracle(*point), abs=1.0
        )

    def test_monotone_in_ac(self):
        # sweep oracle over the physiological AC range at fixed HC
        values = [intergrowth_efw(320.0, ac) for ac in np.linspace(250, 400, 40)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_purity(self):
        assert intergrowth_efw(320, 330) == intergrowth_efw(320, 330)


class TestTable:
    def test_columns(self):
        r = compute_metrics([3000.0, 3100.0], [3100.0, 3000.0])
        table = format_table([("Hadlock", r), ("Model (student)", r)])
        header = table.splitlines()[0]
        for col in ("Method", "MAE(g)", "RMSE(g)", "MAPE(%)"):
            assert col in header
        assert "Hadlock" in table and "Model (student)" in table
