import math

import numpy as np
import pytest

from chemocal.correct import (LinearFit, acc, apply_correction,
                              correction_report, ols_fit, rmse, syx)
from chemocal.errors import DataError
from chemocal.synth import NormalDeviation, SkewNormalDeviation, SynthConfig, \
    generate, induce_attenuation


# ---------------------------------------------------------------------------
# metrics

def test_rmse_identity():
    assert rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0


def test_rmse_hand_value():
    assert abs(rmse([0.0, 0.0], [3.0, 4.0]) - math.sqrt(25.0 / 2.0)) < 1e-12


def test_rmse_single_point():
    assert rmse([1.0], [2.0]) == 1.0


def test_rmse_errors():
    with pytest.raises(DataError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(DataError):
        rmse([], [])


def test_acc_values():
    assert acc(["a", "b"], ["a", "b"]) == 1.0
    assert acc([0, 1, 0, 1], [0, 1, 1, 0]) == 0.5
    assert abs(acc([1, 2, 3], [1, 2, 0]) - 2.0 / 3.0) < 1e-15


# ---------------------------------------------------------------------------
# OLS fit

def test_ols_identity_line():
    fit = ols_fit(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
    assert abs(fit.bias) < 1e-12 and abs(fit.scale - 1.0) < 1e-12


def test_ols_hand_solved():
    fit = ols_fit(np.array([1.0, 2.0, 3.0]), np.array([3.0, 5.0, 7.0]))
    assert abs(fit.bias - 1.0) < 1e-12 and abs(fit.scale - 2.0) < 1e-12


def test_ols_constant_predictions_error():
    with pytest.raises(DataError, match="singular"):
        ols_fit(np.array([2.0, 2.0, 2.0]), np.array([1.0, 2.0, 3.0]))


def hand_normal_equations(yhat, y):
    """2x2 normal equations solved by Cramer's rule on the augmented
    [ones, yhat] design."""
    n = len(yhat)
    sx = float(np.sum(yhat))
    sxx = float(np.sum(yhat * yhat))
    sy = float(np.sum(y))
    sxy = float(np.sum(yhat * y))
    det = n * sxx - sx * sx
    bias = (sy * sxx - sx * sxy) / det
    scale = (n * sxy - sx * sy) / det
    return bias, scale


def test_ols_matches_hand_normal_equations():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(3, 40))
        yhat = rng.normal(size=n) * rng.uniform(0.5, 3.0) + rng.normal()
        y = 2.0 * yhat + rng.normal(size=n)
        fit = ols_fit(yhat, y)
        bias, scale = hand_normal_equations(yhat, y)
        assert abs(fit.bias - bias) < 1e-10
        assert abs(fit.scale - scale) < 1e-10


def test_ols_optimality_property():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(4, 30))
        yhat = rng.normal(size=n)
        y = rng.normal(size=n)
        fit = ols_fit(yhat, y)
        sse_opt = float(fit.residuals @ fit.residuals)
        for _ in range(10):
            b = fit.bias + rng.normal() * 0.5
            s = fit.scale + rng.normal() * 0.5
            resid = y - (s * yhat + b)
            assert sse_opt <= float(resid @ resid) + 1e-12


def test_ols_residual_sum_near_zero():
    rng = np.random.default_rng(2)
    yhat = rng.normal(size=100)
    y = 1.5 * yhat + rng.normal(size=100)
    fit = ols_fit(yhat, y)
    assert abs(fit.residuals.sum()) < 1e-8 * 100 * y.std()


def test_ols_scale_equivariance_in_y():
    rng = np.random.default_rng(3)
    yhat = rng.normal(size=30)
    y = rng.normal(size=30)
    fit = ols_fit(yhat, y)
    scaled = ols_fit(yhat, 3.0 * y)
    assert abs(scaled.bias - 3.0 * fit.bias) < 1e-10
    assert abs(scaled.scale - 3.0 * fit.scale) < 1e-10


# ---------------------------------------------------------------------------
# sYX

def test_syx_exact_affine_is_zero():
    yhat = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert syx(2.0 * yhat - 1.0, yhat) < 1e-14


def test_syx_needs_three_points():
    with pytest.raises(DataError, match="at least 3"):
        syx(np.array([1.0, 2.0]), np.array([1.0, 2.0]))


def brute_force_min_sse(yhat, y, rounds=8):
    """Coarse-to-fine grid search over (bias, scale)."""
    b0, s0, half = 0.0, 1.0, 8.0
    best = None
    for _ in range(rounds):
        bs = np.linspace(b0 - half, b0 + half, 41)
        ss = np.linspace(s0 - half, s0 + half, 41)
        best = (np.inf, b0, s0)
        for b in bs:
            for s in ss:
                resid = y - (s * yhat + b)
                sse = float(resid @ resid)
                if sse < best[0]:
                    best = (sse, b, s)
        _, b0, s0 = best
        half /= 5.0
    return best[0]


def test_syx_matches_brute_force_minimizer():
    yhat = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([1.0, 2.0, 4.0, 4.0])
    sse = brute_force_min_sse(yhat, y)
    expected = math.sqrt(sse / (len(y) - 2))
    assert abs(syx(y, yhat) - expected) < 1e-6


def test_syx_equals_sse_formula_exactly():
    rng = np.random.default_rng(4)
    yhat = rng.normal(size=25)
    y = rng.normal(size=25)
    fit = ols_fit(yhat, y)
    sse = float(fit.residuals @ fit.residuals)
    assert syx(y, yhat) == math.sqrt(sse / 23)


def test_syx_rmse_inequality():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(5, 50))
        yhat = rng.normal(size=n)
        y = rng.normal(size=n)
        assert syx(y, yhat) <= rmse(y, yhat) * math.sqrt(n / (n - 2)) + 1e-12


# ---------------------------------------------------------------------------
# correction

def test_apply_identity_fit_is_bitwise_identity():
    yhat = np.random.default_rng(6).random(10)
    fit = LinearFit(bias=0.0, scale=1.0, residuals=np.zeros(3), syx=0.0,
                    source_split="train")
    assert np.array_equal(apply_correction(yhat, fit), yhat)


def test_apply_correction_arithmetic():
    fit = LinearFit(bias=1.0, scale=2.0, residuals=np.zeros(3), syx=0.0,
                    source_split="val")
    np.testing.assert_array_equal(apply_correction(np.array([1.0, 2.0]), fit),
                                  [3.0, 5.0])


def test_test_sourced_fit_rejected():
    fit = LinearFit(bias=0.0, scale=1.0, residuals=np.zeros(3), syx=0.0,
                    source_split="test")
    with pytest.raises(DataError, match="train or val"):
        apply_correction(np.array([1.0]), fit)


# ---------------------------------------------------------------------------
# report on the synthetic oracle

@pytest.fixture(scope="module")
def attenuated_report():
    config = SynthConfig(n_bulks=20, n_test_bulks=5, subsamples_per_bulk=150,
                         deviation=NormalDeviation(0.72), seed=11)
    data = generate(config)
    pset = induce_attenuation(data, lam=0.8,
                              noise=SkewNormalDeviation(alpha=5.0, omega=0.5),
                              seed=3)
    return correction_report(pset, data.table)


def test_report_shows_attenuation_signature(attenuated_report):
    for split in ("train", "val", "test"):
        bm = attenuated_report["bm"][split]
        assert bm["scale"] > 1.0
        assert bm["bias"] < 0.0
        assert bm["syx"] < bm["rmse"]


def test_report_subsample_rmse_close_to_syx(attenuated_report):
    for split in ("train", "val", "test"):
        ss = attenuated_report["ss"][split]
        assert 0.95 <= ss["rmse"] / ss["syx"] <= 1.05


def test_corrected_test_beats_raw(attenuated_report):
    raw = attenuated_report["bm"]["test"]["rmse"]
    for source in ("train", "val"):
        corrected = attenuated_report["corrected_test"][f"{source}_sourced"]["rmse"]
        assert corrected < raw


def test_test_fitted_correction_sanity_bound(attenuated_report):
    # OLS on the test split itself can only shrink the SSE; the shipped
    # report never uses these parameters.
    config = SynthConfig(n_bulks=16, n_test_bulks=4, subsamples_per_bulk=100,
                         seed=12)
    data = generate(config)
    pset = induce_attenuation(data, lam=0.7, noise=NormalDeviation(0.4), seed=5)
    from chemocal.calib import aggregate_bulk_means
    rows = [r for r in aggregate_bulk_means(pset, data.table) if r.split == "test"]
    y = np.array([r.y_ref for r in rows])
    yhat = np.array([r.yhat_mean for r in rows])
    fit = ols_fit(yhat, y, source_split="test")
    corrected_sse = float(np.sum((y - (fit.scale * yhat + fit.bias)) ** 2))
    raw_sse = float(np.sum((y - yhat) ** 2))
    assert corrected_sse <= raw_sse + 1e-12
    with pytest.raises(DataError):
        apply_correction(yhat, fit)
