import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import logistic_mle_newton

from drcee.data import MrtPanel
from drcee.errors import ConfigError, NonConvergenceError, SingularityError
from drcee.formula import Design, build_design, parse_formula
from drcee.nuisance import (
    CLIP,
    FittedNuisance,
    fit_formula,
    fit_glm,
    fit_numerator,
    fit_pspline_gam,
    predict_arm,
)


def test_gaussian_interpolation():
    fit = fit_glm(Design(np.array([[1.0, 0], [1, 1]])), np.array([1.0, 3.0]))
    np.testing.assert_allclose(fit.coefficients, [1, 2], atol=1e-12)


def test_binomial_intercept_only():
    y = np.array([1, 0, 0, 0] * 5, dtype=float)
    fit = fit_glm(Design(np.ones((20, 1))), y, "binomial")
    assert fit.coefficients[0] == pytest.approx(np.log(0.25 / 0.75), abs=1e-10)
    assert fit.coefficients[0] == pytest.approx(-1.0986, abs=1e-4)


def test_rank_deficient_names_columns():
    X = np.column_stack([np.ones(5), np.arange(5.0), np.arange(5.0)])
    with pytest.raises(SingularityError, match="x2"):
        fit_glm(Design(X), np.arange(5.0))


def test_separation_reported_with_trace():
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    y = np.array([0, 0, 0, 1, 1, 1.0])
    with pytest.raises(NonConvergenceError) as exc:
        fit_glm(Design(X), y, "binomial")
    assert exc.value.trace


def test_binomial_response_checked():
    with pytest.raises(Exception):
        fit_glm(Design(np.ones((3, 1))), np.array([0.0, 0.5, 1.0]), "binomial")


def _logit_data(seed, n=400):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(-1, 1, n)])
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ [-0.3, 0.8, -1.2])))).astype(float)
    return X, y


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_irls_matches_loop_newton(seed):
    X, y = _logit_data(seed)
    fit = fit_glm(Design(X), y, "binomial")
    np.testing.assert_allclose(fit.coefficients, logistic_mle_newton(X, y), atol=1e-9)
    score = X.T @ (y - 1 / (1 + np.exp(-X @ fit.coefficients)))
    assert np.max(np.abs(score)) < 1e-8


def _smooth_data(seed, n=600, sd=0.3):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-2, 2, n)
    t = rng.integers(1, 21, n).astype(float)
    return {"z": z, "t": t}, np.sin(2 * z) + 0.5 * z + 0.05 * t + sd * rng.normal(size=n)


@pytest.mark.parametrize("lam", [0.01, 1.0, 50.0])
def test_fixed_lambda_equals_dense_solve(lam):
    v, y = _smooth_data(1)
    design = build_design(v, parse_formula("y ~ s(z) + t"))
    fit = fit_pspline_gam(design, y, lambda_grid=[lam])
    X = design.matrix
    P = design.info.penalty([1.0])
    ref = np.linalg.solve(X.T @ X + lam * P, X.T @ y)
    np.testing.assert_allclose(fit.coefficients, ref, atol=1e-8)


def test_lambda_zero_equals_glm():
    v, y = _smooth_data(2)
    design = build_design(v, parse_formula("y ~ s(z)"))
    gam = fit_pspline_gam(design, y, lambda_grid=[0.0])
    glm = fit_glm(design, y)
    np.testing.assert_allclose(gam.coefficients, glm.coefficients, atol=1e-8)


def test_lambda_zero_equals_glm_binomial():
    rng = np.random.default_rng(5)
    z = rng.uniform(-2, 2, 800)
    y = (rng.random(800) < 1 / (1 + np.exp(-np.sin(z)))).astype(float)
    design = build_design({"z": z}, parse_formula("r ~ s(z, 6)", "binomial"))
    gam = fit_pspline_gam(design, y, "binomial", lambda_grid=[0.0])
    glm = fit_glm(design, y, "binomial")
    np.testing.assert_allclose(gam.coefficients, glm.coefficients, atol=1e-8)


@pytest.mark.parametrize("family", ["gaussian", "binomial"])
def test_huge_lambda_gives_linear_fit(family):
    rng = np.random.default_rng(3)
    z = rng.uniform(-2, 2, 1000)
    t = rng.uniform(1, 20, 1000)
    if family == "gaussian":
        y = np.cos(z) + 0.1 * t + rng.normal(size=1000)
    else:
        y = (rng.random(1000) < 1 / (1 + np.exp(-np.cos(2 * z)))).astype(float)
    v = {"z": z, "t": t}
    gam = fit_formula(v, y, parse_formula("y ~ s(z) + s(t)", family), "gam", lambda_grid=[1e10])
    lin = fit_formula(v, y, parse_formula("y ~ z + t", family), "glm")
    np.testing.assert_allclose(gam.predict(v), lin.predict(v), atol=1e-4)


def test_sin_recovery():
    rng = np.random.default_rng(11)
    z = rng.uniform(-np.pi, np.pi, 4000)
    y = np.sin(z) + rng.normal(0, 0.1, 4000)
    fit = fit_formula({"z": z}, y, "y ~ s(z)", "gam")
    grid = np.linspace(-np.pi, np.pi, 201)
    rmse = np.sqrt(np.mean((fit.predict({"z": grid}) - np.sin(grid)) ** 2))
    assert rmse < 0.05


def test_gcv_lambda_in_grid_and_order_free():
    v, y = _smooth_data(4)
    design = build_design(v, parse_formula("y ~ s(z)"))
    grid = list(np.logspace(-3, 3, 13))
    a = fit_pspline_gam(design, y, lambda_grid=grid)
    b = fit_pspline_gam(design, y, lambda_grid=grid[::-1])
    (lam,) = a.lam.values()
    assert lam in grid
    assert a.lam == b.lam
    assert a.gcv == min(g for _, g in a.gcv_path)


def test_gcv_prefers_smoothing_for_noise():
    rng = np.random.default_rng(8)
    z = rng.uniform(0, 1, 500)
    fit = fit_formula({"z": z}, rng.normal(size=500), "y ~ s(z)", "gam")
    assert fit.edf < 4


def test_bad_grid():
    v, y = _smooth_data(0)
    design = build_design(v, parse_formula("y ~ s(z)"))
    with pytest.raises(ConfigError):
        fit_pspline_gam(design, y, lambda_grid=[])


def test_predict_arm_hand_value():
    v = {"a": np.array([0.0]), "z": np.array([2.0])}
    info = build_design({"a": np.array([0.0, 1]), "z": np.array([0.0, 1])}, parse_formula("y ~ a + z")).info
    fit = FittedNuisance(coefficients=np.array([1.0, 2.0, 0.5]), family="gaussian", info=info)
    assert predict_arm(fit, v, 1)[0] == pytest.approx(4.0)
    assert predict_arm(fit, v, 0)[0] == pytest.approx(2.0)


def test_predict_arm_no_treatment_terms():
    v, y = _smooth_data(0, n=200)
    v["a"] = (np.arange(200) % 2).astype(float)
    fit = fit_formula(v, y, "y ~ s(z)", "gam")
    np.testing.assert_array_equal(predict_arm(fit, v, 0), predict_arm(fit, v, 1))


def test_predict_arm_observed_reproduces_fit():
    rng = np.random.default_rng(2)
    v = {"z": rng.normal(size=300), "a": (rng.random(300) < 0.5).astype(float)}
    y = v["a"] * (1 + v["z"]) + rng.normal(size=300)
    fit = fit_formula(v, y, "y ~ a*(s(z)) + s(z)", "gam")
    mix = np.where(v["a"] == 1, predict_arm(fit, v, 1), predict_arm(fit, v, 0))
    np.testing.assert_array_equal(mix, fit.predict(v))


def test_binomial_prediction_clipped():
    info = build_design({"z": np.array([0.0, 1])}, parse_formula("r ~ z", "binomial")).info
    fit = FittedNuisance(coefficients=np.array([40.0, 0.0]), family="binomial", info=info)
    assert fit.predict({"z": np.array([0.0])})[0] == 1 - CLIP
    fit = FittedNuisance(coefficients=np.array([-40.0, 0.0]), family="binomial", info=info)
    assert fit.predict({"z": np.array([0.0])})[0] == CLIP


def test_json_round_trip():
    v, y = _smooth_data(6, n=300)
    v["a"] = (np.arange(300) % 3 == 0).astype(float)
    fit = fit_formula(v, y, "y ~ a*(s(z)) + s(z)", "gam")
    back = FittedNuisance.from_dict(json.loads(fit.to_json()))
    np.testing.assert_array_equal(back.predict_arm(v, 1), fit.predict_arm(v, 1))
    np.testing.assert_allclose(back.penalty, fit.penalty)


def _panel(a, avail=None):
    n = len(a)
    avail = np.ones(n, dtype=int) if avail is None else np.asarray(avail)
    a = np.asarray(a) * avail
    return MrtPanel.from_arrays(ids=np.repeat([1, 2], n // 2), t=np.tile(np.arange(1, n // 2 + 1), 2), avail=avail,
                                treat=a, prob_treat=np.where(avail == 1, 0.5, 0.0), obs_flag=np.ones(n),
                                outcome=np.zeros(n), covariates={"z": np.linspace(0, 1, n)})


def test_numerator_constant():
    p = _panel([0, 1, 0, 1, 0, 0])
    assert np.all(fit_numerator(p, 0.6).predict(p.variables()) == 0.6)
    with pytest.raises(ConfigError):
        fit_numerator(p, 1.2)


def test_numerator_intercept_logistic():
    p = _panel([1, 0, 0, 1, 0, 0, 0, 1, 1, 0], avail=[1, 1, 1, 1, 1, 0, 1, 1, 1, 1])
    fit = fit_numerator(p, "a ~ 1")
    on = p.avail == 1
    target = p.treat[on].mean()
    assert target == pytest.approx(4 / 9)
    np.testing.assert_allclose(fit.predict(p.variables()), target, atol=1e-10)
    assert fit_numerator(p).predict(p.variables())[0] == pytest.approx(target)


def test_numerator_cannot_use_treatment():
    p = _panel([0, 1, 0, 1])
    with pytest.raises(ConfigError):
        fit_numerator(p, "a ~ a")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(1e-3, 1e3))
def test_penalized_gaussian_property(seed, lam):
    v, y = _smooth_data(seed, n=150)
    design = build_design(v, parse_formula("y ~ s(z, 8)"))
    fit = fit_pspline_gam(design, y, lambda_grid=[lam])
    X, S = design.matrix, fit.penalty
    # stationarity of the penalized least-squares objective
    grad = X.T @ (y - X @ fit.coefficients) - S @ fit.coefficients
    assert np.max(np.abs(grad)) < 1e-7 * max(1.0, np.abs(X.T @ y).max())
    assert 1.0 <= fit.edf <= X.shape[1] + 1e-9
