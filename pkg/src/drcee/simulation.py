"""Monte Carlo study: data generators, stage-1 implementations A-D, metrics."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .data import MrtPanel
from .errors import CeeError, ConfigError, DataError
from .estimator import (
    CeeEstimate,
    CeeModel,
    NuisanceSet,
    Stage1Config,
    estimate_cee,
    resolve_variance_mode,
    solve,
)
from .nuisance import ConstantPredictor, fit_formula, fit_numerator
from .variance import sandwich_nonparametric, sandwich_parametric, wald_ci

PATTERNS = ("linear", "simple_nonlinear", "periodic")
E_ALPHA = {"linear": (-0.5, 1.5), "simple_nonlinear": (-2.0, 1.5), "periodic": (0.5, 1.5)}
MU0_ALPHA = (0.5, 1.5)
IMPLEMENTATIONS = ("A", "B", "C", "D")
DEFAULT_BETA = {"identity": (1.5, 2.1), "log": (0.3, 0.8)}
# baseline success probability for the log-link generator lies in (Q_LO, Q_LO + Q_SPAN)
Q_LO, Q_SPAN = 0.05, 0.30
MAX_FAILURE_RATE = 0.05


def beta22_density(x):
    """Density of Beta(2, 2): ``6 x (1 - x)`` on [0, 1]."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("Beta(2,2) density argument outside [0, 1]")
    return 6.0 * x * (1.0 - x)


def g_fn(pattern: str, alpha0: float, alpha1: float, t, T: int, z):
    """Generating functions for the missingness logit and baseline outcome mean."""
    t = np.asarray(t, dtype=float)
    z = np.asarray(z, dtype=float)
    if pattern == "linear":
        return alpha0 + alpha1 * (t / T + z / 6)
    if pattern == "simple_nonlinear":
        return alpha0 + alpha1 * (beta22_density(z / 6 + 0.5) + beta22_density(t / T))
    if pattern == "periodic":
        return alpha0 + alpha1 * (np.sin(t) + np.sin(z))
    raise ConfigError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")


@dataclass(frozen=True)
class SimScenario:
    pattern_e: str = "linear"
    pattern_mu0: str = "linear"
    T: int = 20
    p_treat: float = 0.4
    beta_true: tuple | None = None
    n: int = 200
    n_reps: int = 1000
    seed: int = 20240601
    link: str = "identity"

    def __post_init__(self):
        if self.pattern_e not in PATTERNS or self.pattern_mu0 not in PATTERNS:
            raise ConfigError(f"patterns must be in {PATTERNS}")
        if self.n < 2 or self.n_reps < 1 or self.T < 1:
            raise ConfigError("need n >= 2, n_reps >= 1, T >= 1")
        if not 0 < self.p_treat < 1:
            raise ConfigError("p_treat must lie in (0, 1)")
        if self.link not in DEFAULT_BETA:
            raise ConfigError(f"unknown link {self.link!r}")
        b0, b1 = self.beta
        if self.link == "log" and math.exp(b0 + abs(b1) / 2) * (Q_LO + Q_SPAN) >= 1:
            raise ConfigError("log-link effect too large: success probabilities would exceed 1")

    @property
    def beta(self) -> tuple:
        return tuple(self.beta_true) if self.beta_true is not None else DEFAULT_BETA[self.link]

    def model(self) -> CeeModel:
        if self.link == "log":
            return CeeModel(link="log", f_spec=("1", ("z/4", _quarter_z)))
        return CeeModel(link=self.link, f_spec=("1", "z"))


def _quarter_z(t, covs):
    return covs["z"] / 4


@dataclass(frozen=True, eq=False)
class SimPanel:
    """Generated panel plus the exact nuisance functions evaluated on its rows."""

    panel: MrtPanel
    e_true: np.ndarray
    mu1_true: np.ndarray
    mu0_true: np.ndarray


def rep_rng(seed: int, n: int, rep_index: int) -> np.random.Generator:
    """Counter-based stream for one replication, independent of scheduling."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(n), int(rep_index)))
    return np.random.Generator(np.random.Philox(ss))


def true_nuisances(scenario: SimScenario, t, z):
    """Exact (e, mu1, mu0) at decision points ``t`` with covariate ``z``."""
    b0, b1 = scenario.beta
    e = expit(g_fn(scenario.pattern_e, *E_ALPHA[scenario.pattern_e], t, scenario.T, z))
    if scenario.link == "identity":
        mu0 = g_fn(scenario.pattern_mu0, *MU0_ALPHA, t, scenario.T, z)
        mu1 = mu0 + b0 + b1 * z
    else:
        q = Q_LO + Q_SPAN * expit(g_fn(scenario.pattern_mu0, -0.5, 1.5, t, scenario.T, z))
        mu0 = q
        mu1 = q * np.exp(b0 + b1 * z / 4)
    return e, mu1, mu0


def generate_panel(scenario: SimScenario, rep_index: int = 0, n: int | None = None) -> SimPanel:
    n = scenario.n if n is None else n
    T = scenario.T
    rng = rep_rng(scenario.seed, n, rep_index)
    z = rng.uniform(-2.0, 2.0, size=(n, T))
    a = (rng.random((n, T)) < scenario.p_treat).astype(np.int8)
    u_r = rng.random((n, T))
    tt = np.broadcast_to(np.arange(1, T + 1), (n, T))
    e, mu1, mu0 = true_nuisances(scenario, tt, z)
    r = (u_r < e).astype(np.int8)
    mean = np.where(a == 1, mu1, mu0)
    if scenario.link == "identity":
        y = mean + rng.standard_normal((n, T))
    else:
        y = (rng.random((n, T)) < mean).astype(float)
    y = np.where(r == 1, y, np.nan)
    ids = np.repeat(np.arange(n), T)
    panel = MrtPanel.from_arrays(
        ids=ids, t=tt.reshape(-1), avail=np.ones(n * T, dtype=np.int8), treat=a.reshape(-1),
        prob_treat=np.full(n * T, scenario.p_treat), obs_flag=r.reshape(-1), outcome=y.reshape(-1),
        covariates={"z": z.reshape(-1)},
    )
    return SimPanel(panel, e.reshape(-1), mu1.reshape(-1), mu0.reshape(-1))


_E_FORMULAS = {"full": "r ~ s(z) + s(t)", "t_only": "r ~ s(t)"}
_MU_FORMULAS = {
    "full": "y ~ a*(s(z) + s(t)) + s(z) + s(t)",
    "no_z": "y ~ a*s(t) + s(t)",
    "no_treat": "y ~ s(z) + s(t)",
}
_TABLE = {"A": ("full", "full"), "B": ("t_only", "full"), "C": ("full", "no_z"), "D": ("t_only", "no_treat")}


def implementation_spec(which: str, link: str = "identity", ptilde=None, engine: str = "gam") -> Stage1Config:
    """Stage-1 configuration for implementation A, B, C or D.

    A fits both models with smooths in z and t; B drops ``s(z)`` from the
    missingness model; C drops the z terms from the outcome model; D does both
    and also drops the treatment terms from the outcome model.
    """
    if which not in _TABLE:
        raise ConfigError(f"implementation must be one of {IMPLEMENTATIONS}")
    e_key, mu_key = _TABLE[which]
    return Stage1Config(
        e_formula=_E_FORMULAS[e_key],
        mu_formula=_MU_FORMULAS[mu_key],
        ptilde=ptilde,
        engine=engine,
        mu_family="gaussian" if link == "identity" else "binomial",
    )


# --- comparators -----------------------------------------------------------------


def _with_variance(panel, nuisances, est, model, stage1, mask=None):
    nv = nuisances.evaluate(panel)
    if mask is not None:
        nv = replace(nv, mask=mask)
    mode = resolve_variance_mode(stage1, nuisances)
    if mode == "parametric":
        vcov = sandwich_parametric(panel, nuisances, est.beta, model, mask=mask)
    else:
        vcov = sandwich_nonparametric(panel, nv, est.beta, model)
    return replace(est, vcov=vcov, variance_mode=mode)


def complete_case(panel: MrtPanel, model: CeeModel, stage1: Stage1Config) -> CeeEstimate:
    """Full-data estimator restricted to records with an observed outcome."""
    base = _fit_without_e(panel, stage1)
    mask = panel.obs_flag.astype(float)
    nv = replace(base.evaluate(panel), mask=mask)
    est = solve(panel, nv, model)
    return _with_variance(panel, base, est, model, stage1, mask)


def _fit_without_e(panel, stage1):
    spec = stage1.spec("mu")
    v = panel.variables()
    keep = (panel.avail == 1) & (panel.obs_flag == 1)
    mu = ConstantPredictor(0.0) if spec is None else fit_formula(
        {k: x[keep] for k, x in v.items()}, panel.outcome[keep], spec, stage1.engine, stage1.lambda_grid)
    return NuisanceSet(ConstantPredictor(1.0), mu, fit_numerator(panel, stage1.ptilde))


def impute_zero(panel: MrtPanel, model: CeeModel, stage1: Stage1Config) -> CeeEstimate:
    filled = panel.with_outcomes(np.where(panel.obs_flag == 1, panel.outcome, 0.0), np.ones(panel.N))
    return estimate_cee(filled, model, replace(stage1, e_formula=None))


def impute_mean(panel: MrtPanel, model: CeeModel, stage1: Stage1Config) -> CeeEstimate:
    """Fill each individual's missing outcomes with that individual's observed mean.

    Individuals with no observed outcome are dropped with a warning.
    """
    Y = panel.outcome.reshape(panel.n, panel.T)
    R = panel.obs_flag.reshape(panel.n, panel.T) == 1
    has = R.any(axis=1)
    if not has.all():
        dropped = [panel.individual_ids[i] for i in np.flatnonzero(~has)]
        warnings.warn(f"impute-mean: dropping individuals with no observed outcome: {dropped}", RuntimeWarning,
                      stacklevel=2)
        panel = panel.select([panel.individual_ids[i] for i in np.flatnonzero(has)])
        Y = panel.outcome.reshape(panel.n, panel.T)
        R = panel.obs_flag.reshape(panel.n, panel.T) == 1
    means = np.nansum(np.where(R, Y, 0.0), axis=1) / R.sum(axis=1)
    filled = np.where(R, Y, means[:, None]).reshape(-1)
    return estimate_cee(panel.with_outcomes(filled, np.ones(panel.N)), model, replace(stage1, e_formula=None))


COMPARATORS = {"complete_case": complete_case, "impute_zero": impute_zero, "impute_mean": impute_mean}


def comparator_estimators(panel: MrtPanel, model: CeeModel, stage1: Stage1Config) -> dict[str, CeeEstimate]:
    """Complete-case, impute-zero and impute-mean baselines."""
    return {name: fn(panel, model, stage1) for name, fn in COMPARATORS.items()}


# --- study runner ------------------------------------------------------------------


@dataclass(frozen=True)
class RepResult:
    implementation: str
    n: int
    rep: int
    beta: tuple | None
    se: tuple | None
    covered: tuple | None
    error: str | None = None


@dataclass(frozen=True)
class SimMetrics:
    implementation: str
    n: int
    coefficient: str
    bias: float
    mse: float
    coverage: float
    mean_se: float
    mc_sd: float
    bias_mc_se: float
    n_reps: int
    n_failed: int


def _estimate_rep(panel, model, impls, link, ptilde, engine, level, beta_true):
    """Fit each distinct stage-1 model once and run every implementation."""
    cache = {}
    out = {}
    v = panel.variables()
    on = panel.avail == 1
    R = panel.obs_flag == 1
    for which in impls:
        cfg = implementation_spec(which, link, ptilde, engine)
        try:
            for key, spec, rows, resp in (
                ("e:" + cfg.e_formula, cfg.spec("e"), on, R[on].astype(float)),
                ("mu:" + cfg.mu_formula, cfg.spec("mu"), on & R, panel.outcome[on & R]),
            ):
                if key not in cache:
                    try:
                        cache[key] = fit_formula({k: x[rows] for k, x in v.items()}, resp, spec, engine)
                    except CeeError as exc:
                        cache[key] = exc
                if isinstance(cache[key], Exception):
                    raise cache[key]
            if "ptilde" not in cache:
                cache["ptilde"] = fit_numerator(panel, ptilde)
            ns = NuisanceSet(cache["e:" + cfg.e_formula], cache["mu:" + cfg.mu_formula], cache["ptilde"])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                est = estimate_cee(panel, model, cfg, nuisances=ns)
            lo, hi = wald_ci(est.beta, est.vcov, level)
            covered = tuple(bool(a <= b <= c) for a, b, c in zip(lo, beta_true, hi))
            out[which] = (tuple(est.beta.tolist()), tuple(est.se.tolist()), covered, None)
        except CeeError as exc:
            out[which] = (None, None, None, f"{type(exc).__name__}: {exc}")
    return out


def _run_one(args):
    scenario, n, rep, impls, engine, level = args
    sim = generate_panel(scenario, rep, n)
    res = _estimate_rep(sim.panel, scenario.model(), impls, scenario.link, scenario.p_treat, engine, level,
                        scenario.beta)
    return [RepResult(w, n, rep, *res[w]) for w in impls]


def _init_worker():
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


@dataclass
class StudyResult:
    scenario: SimScenario
    implementations: tuple
    n_values: tuple
    reps: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    @property
    def flagged(self) -> list:
        """(implementation, n) cells whose failure rate exceeds 5%."""
        out = []
        for w in self.implementations:
            for n in self.n_values:
                cell = [r for r in self.reps if r.implementation == w and r.n == n]
                if cell and sum(r.error is not None for r in cell) / len(cell) > MAX_FAILURE_RATE:
                    out.append((w, n))
        return out

    def get(self, implementation, n, coefficient) -> SimMetrics:
        for m in self.metrics:
            if (m.implementation, m.n, m.coefficient) == (implementation, n, coefficient):
                return m
        raise KeyError((implementation, n, coefficient))


def aggregate(reps: Sequence[RepResult], beta_true, names) -> list[SimMetrics]:
    out = []
    keys = sorted({(r.implementation, r.n) for r in reps})
    for w, n in keys:
        cell = [r for r in reps if r.implementation == w and r.n == n]
        ok = [r for r in cell if r.error is None]
        n_failed = len(cell) - len(ok)
        for j, name in enumerate(names):
            if not ok:
                out.append(SimMetrics(w, n, name, *([math.nan] * 6), 0, n_failed))
                continue
            b = np.array([r.beta[j] for r in ok])
            se = np.array([r.se[j] for r in ok])
            cov = np.array([r.covered[j] for r in ok], dtype=float)
            dev = b - beta_true[j]
            sd = float(np.std(b, ddof=1)) if len(b) > 1 else 0.0
            out.append(SimMetrics(
                implementation=w, n=n, coefficient=name,
                bias=float(dev.mean()), mse=float(np.mean(dev ** 2)), coverage=float(cov.mean()),
                mean_se=float(se.mean()), mc_sd=sd, bias_mc_se=sd / math.sqrt(len(b)),
                n_reps=len(ok), n_failed=n_failed,
            ))
    return out


def run_study(scenario: SimScenario, implementations: Iterable[str] = IMPLEMENTATIONS,
              n_values: Iterable[int] | None = None, parallelism: int = 1, engine: str = "gam",
              level: float = 0.95, progress=None) -> StudyResult:
    """Replicate generate -> estimate for each (n, rep) and aggregate metrics.

    Results do not depend on ``parallelism``: each replication draws from its
    own counter-based stream and results are reduced in (n, rep) order.
    """
    impls = tuple(implementations)
    for w in impls:
        if w not in IMPLEMENTATIONS:
            raise ConfigError(f"unknown implementation {w!r}")
    n_values = tuple(n_values) if n_values is not None else (scenario.n,)
    tasks = [(scenario, n, rep, impls, engine, level) for n in n_values for rep in range(scenario.n_reps)]
    reps: list[RepResult] = []
    if parallelism <= 1:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(1):
            for k, task in enumerate(tasks):
                reps.extend(_run_one(task))
                if progress:
                    progress(k + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=parallelism, initializer=_init_worker) as pool:
            for k, chunk in enumerate(pool.map(_run_one, tasks, chunksize=4)):
                reps.extend(chunk)
                if progress:
                    progress(k + 1, len(tasks))
    names = scenario.model().feature_names
    result = StudyResult(scenario, impls, n_values, reps, aggregate(reps, scenario.beta, names))
    if result.flagged:
        warnings.warn(f"failure rate above {MAX_FAILURE_RATE:.0%} in cells {result.flagged}", RuntimeWarning,
                      stacklevel=2)
    return result


METRIC_FIELDS = [f for f in SimMetrics.__dataclass_fields__]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(metrics: Sequence[SimMetrics], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow([_fmt(v) for v in asdict(m).values()])


def write_plot_csv(metrics: Sequence[SimMetrics], path) -> None:
    """Long format: one row per (implementation, n, coefficient, metric)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["implementation", "n", "coefficient", "metric", "value"])
        for m in metrics:
            for metric in ("bias", "mse", "coverage"):
                w.writerow([m.implementation, m.n, m.coefficient, metric, _fmt(getattr(m, metric))])


def read_metrics_csv(path) -> list[SimMetrics]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(SimMetrics(
                implementation=row["implementation"], n=int(row["n"]), coefficient=row["coefficient"],
                **{k: float(row[k]) for k in ("bias", "mse", "coverage", "mean_se", "mc_sd", "bias_mc_se")},
                n_reps=int(row["n_reps"]), n_failed=int(row["n_failed"]),
            ))
    return out
