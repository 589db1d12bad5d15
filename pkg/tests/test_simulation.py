import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from drcee.data import MrtPanel
from drcee.errors import ConfigError
from drcee.estimator import Stage1Config, estimate_cee
from drcee.simulation import (
    IMPLEMENTATIONS,
    RepResult,
    SimScenario,
    aggregate,
    beta22_density,
    complete_case,
    g_fn,
    generate_panel,
    impute_mean,
    impute_zero,
    implementation_spec,
    read_metrics_csv,
    run_study,
    write_metrics_csv,
    write_plot_csv,
)


def test_g_fn_examples():
    assert g_fn("linear", 0.0, 1.0, 5, 10, 3.0) == pytest.approx(1.0)
    assert beta22_density(0.5) == pytest.approx(1.5)
    assert g_fn("simple_nonlinear", 0.0, 1.0, 5, 10, 0.0) == pytest.approx(3.0)
    assert g_fn("periodic", 1.0, 2.0, math.pi / 2, 10, 0.0) == pytest.approx(3.0)
    with pytest.raises(ConfigError):
        g_fn("cubic", 0, 1, 1, 1, 0)


def test_beta22_domain():
    with pytest.raises(ValueError):
        beta22_density(1.2)


def test_generation_deterministic():
    sc = SimScenario(n=30, T=5, seed=11)
    a, b = generate_panel(sc, 3), generate_panel(sc, 3)
    np.testing.assert_array_equal(a.panel.treat, b.panel.treat)
    np.testing.assert_array_equal(np.nan_to_num(a.panel.outcome), np.nan_to_num(b.panel.outcome))
    c = generate_panel(sc, 4)
    assert not np.array_equal(a.panel.covariates, c.panel.covariates)


def test_generated_panel_shape():
    sim = generate_panel(SimScenario(n=15, T=7, seed=1), 0)
    p = sim.panel
    assert (p.n, p.T) == (15, 7)
    assert np.all(p.avail == 1) and np.all(p.prob_treat == 0.4)
    assert np.all(np.isnan(p.outcome[p.obs_flag == 0]))
    z = p.covariate("z")
    assert z.min() >= -2 and z.max() <= 2


def test_treatment_rate():
    p = generate_panel(SimScenario(n=2000, T=20, seed=2), 0).panel
    # binomial sd of the rate is about 0.0024
    assert abs(p.treat.mean() - 0.4) < 0.01


@pytest.mark.parametrize("pattern", ["linear", "simple_nonlinear", "periodic"])
def test_missingness_rate_matches_quadrature(pattern):
    from drcee.simulation import E_ALPHA

    T = 20
    a0, a1 = E_ALPHA[pattern]
    expected = np.mean([
        quad(lambda z, t=t: 1 / (1 + math.exp(-g_fn(pattern, a0, a1, t, T, z))) / 4, -2, 2)[0]
        for t in range(1, T + 1)
    ])
    p = generate_panel(SimScenario(pattern_e=pattern, n=2000, T=T, seed=3), 0).panel
    assert abs(p.obs_flag.mean() - expected) < 0.01


def test_log_link_generator_positive_and_bounded():
    sim = generate_panel(SimScenario(link="log", n=100, T=10, seed=5), 0)
    assert np.all((sim.mu1_true > 0) & (sim.mu1_true < 1))
    y = sim.panel.outcome[sim.panel.obs_flag == 1]
    assert set(np.unique(y)) <= {0.0, 1.0}


def test_log_link_effect_too_large():
    with pytest.raises(ConfigError):
        SimScenario(link="log", beta_true=(1.2, 0.8))


def test_implementations_distinct():
    specs = {w: implementation_spec(w) for w in IMPLEMENTATIONS}
    pairs = {(s.e_formula, s.mu_formula) for s in specs.values()}
    assert len(pairs) == 4
    assert "z" not in specs["B"].e_formula
    assert "a" not in specs["D"].mu_formula.split("~")[1]
    assert specs["C"].mu_formula == "y ~ a*s(t) + s(t)"
    with pytest.raises(ConfigError):
        implementation_spec("E")


def _no_missing(sc, rep=0):
    p = generate_panel(sc, rep).panel
    cols = p._columns()
    cols["obs_flag"] = np.ones(p.N)
    rng = np.random.default_rng(0)
    cols["outcome"] = np.where(p.obs_flag == 1, p.outcome, rng.normal(size=p.N))
    return MrtPanel.from_arrays(**cols)


def test_comparators_coincide_without_missingness():
    sc = SimScenario(n=40, T=6, seed=9)
    panel = _no_missing(sc)
    cfg = Stage1Config(None, "y ~ a*(z + t) + z + t", 0.4, engine="glm")
    est = estimate_cee(panel, sc.model(), cfg)
    for fn in (complete_case, impute_zero, impute_mean):
        np.testing.assert_allclose(fn(panel, sc.model(), cfg).beta, est.beta, atol=1e-10)


def test_impute_zero_equals_hand_filled():
    sc = SimScenario(n=30, T=5, seed=4)
    panel = generate_panel(sc, 0).panel
    cfg = Stage1Config("r ~ z + t", "y ~ a*(z) + z", 0.4, engine="glm")
    filled = MrtPanel.from_arrays(**{**panel._columns(), "outcome": np.nan_to_num(panel.outcome),
                                     "obs_flag": np.ones(panel.N)})
    ref = estimate_cee(filled, sc.model(), Stage1Config(None, "y ~ a*(z) + z", 0.4, engine="glm"))
    np.testing.assert_allclose(impute_zero(panel, sc.model(), cfg).beta, ref.beta, atol=1e-12)


def test_impute_mean_drops_individuals_without_outcomes():
    sc = SimScenario(n=20, T=4, seed=6)
    panel = generate_panel(sc, 0).panel
    cols = panel._columns()
    R = cols["obs_flag"].copy()
    R[:4] = 0
    cols["obs_flag"] = R
    cols["outcome"] = np.where(R == 1, cols["outcome"], np.nan)
    panel = MrtPanel.from_arrays(**cols)
    cfg = Stage1Config("r ~ z", "y ~ a*(z) + z", 0.4, engine="glm")
    with pytest.warns(RuntimeWarning, match="dropping"):
        est = impute_mean(panel, sc.model(), cfg)
    assert np.all(np.isfinite(est.beta))


def test_complete_case_ignores_missing_rows():
    sc = SimScenario(n=40, T=5, seed=8)
    panel = generate_panel(sc, 0).panel
    cfg = Stage1Config("r ~ z", "y ~ a*(z) + z", 0.4, engine="glm")
    est = complete_case(panel, sc.model(), cfg)
    # same estimate if the missing rows are dropped by making them unavailable
    cols = panel._columns()
    miss = panel.obs_flag == 0
    cols.update(avail=np.where(miss, 0, 1), treat=np.where(miss, 0, panel.treat),
                prob_treat=np.where(miss, 0.0, panel.prob_treat), obs_flag=np.ones(panel.N),
                outcome=np.nan_to_num(panel.outcome))
    sub = MrtPanel.from_arrays(**cols)
    ref = estimate_cee(sub, sc.model(), Stage1Config(None, "y ~ a*(z) + z", 0.4, engine="glm"))
    np.testing.assert_allclose(est.beta, ref.beta, atol=1e-10)


def test_single_rep_coverage_is_binary():
    res = run_study(SimScenario(n=60, T=12, n_reps=1, seed=3), ["A"])
    for m in res.metrics:
        assert m.coverage in (0.0, 1.0)
        assert m.n_reps == 1 and m.mc_sd == 0.0


def test_mse_identity():
    reps = [RepResult("A", 50, k, (1.5 + 0.1 * k, 2.0 - 0.05 * k * k), (0.1, 0.1), (True, False)) for k in range(7)]
    (m0, m1) = aggregate(reps, (1.5, 2.1), ["(Intercept)", "z"])
    for m, j in ((m0, 0), (m1, 1)):
        b = np.array([r.beta[j] for r in reps])
        var0 = np.var(b)
        assert m.mse == pytest.approx(m.bias ** 2 + var0, abs=1e-12)
        assert m.mc_sd == pytest.approx(np.std(b, ddof=1), rel=1e-12)
    assert m0.coverage == 1.0 and m1.coverage == 0.0


def test_aggregate_counts_failures():
    reps = [RepResult("A", 10, 0, (1.0,), (0.1,), (True,)), RepResult("A", 10, 1, None, None, None, "boom")]
    (m,) = aggregate(reps, (1.0,), ["(Intercept)"])
    assert (m.n_reps, m.n_failed) == (1, 1)


def test_failure_rate_flagged():
    from drcee.simulation import StudyResult

    reps = [RepResult("A", 10, k, None, None, None, "x") for k in range(3)]
    reps += [RepResult("A", 10, k, (1.0,), (1.0,), (True,)) for k in range(3, 30)]
    res = StudyResult(SimScenario(), ("A",), (10,), reps, [])
    assert res.flagged == [("A", 10)]


def test_study_metric_files(tmp_path):
    res = run_study(SimScenario(n=40, T=12, n_reps=2, seed=5), ["A", "D"], n_values=[40, 60])
    assert len(res.metrics) == 2 * 2 * 2
    write_metrics_csv(res.metrics, tmp_path / "m.csv")
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back == res.metrics
    write_plot_csv(res.metrics, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == 1 + 8 * 3
    assert res.get("D", 60, "z").n == 60


def test_study_independent_of_parallelism():
    sc = SimScenario(n=30, T=12, n_reps=3, seed=12)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = run_study(sc, ["A", "C"], parallelism=1)
        b = run_study(sc, ["A", "C"], parallelism=2)
    assert a.metrics == b.metrics
