"""Doubly robust estimating function for causal excursion effects and its solvers.

Per decision point the augmented estimating function is::

    I W W_delta [ (R/e) r(beta) (Y - A mu1 - (1-A) mu0)
                  + (A + p - 1) c(beta) ] (A - ptilde) f

with ``r = 1`` and ``c = mu1 - mu0 - f'beta`` for the identity link, and
``r = exp(-A f'beta)`` and ``c = exp(-f'beta) mu1 - mu0`` for the log link.
Records with ``R = 0`` contribute only the augmentation; unavailable records
contribute nothing.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import MrtPanel
from .errors import ConfigError, DataError, EstimabilityError, NonConvergenceError, NumericalError, SingularityError
from .formula import FormulaSpec, parse_formula
from .nuisance import CLIP, DEFAULT_LAMBDA_GRID, ConstantPredictor, fit_formula, fit_numerator

LINKS = ("identity", "log")
PI_MODES = ("irrelevant", "column", "constant")
COND_LIMIT = 1e10
E_WARN = 0.01


# --- model -------------------------------------------------------------------


@dataclass(frozen=True)
class CeeModel:
    """Effect model ``g-contrast = f(t, S_t)' beta``.

    ``f_spec`` items are ``"1"``, ``"t"``, a covariate name, or a
    ``(name, fn)`` pair where ``fn(t, covariates)`` returns one value per row.
    """

    link: str = "identity"
    f_spec: tuple = ("1",)
    delta: int = 1
    pi_mode: str = "irrelevant"
    pi_value: float | None = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise ConfigError(f"link must be one of {LINKS}, got {self.link!r}")
        if not self.f_spec:
            raise ConfigError("f_spec needs at least one feature")
        if self.pi_mode not in PI_MODES:
            raise ConfigError(f"pi_mode must be one of {PI_MODES}")
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if self.delta == 1 and self.pi_mode != "irrelevant":
            raise ConfigError("the reference policy is irrelevant when delta = 1")
        if self.delta > 1 and self.pi_mode == "irrelevant":
            raise ConfigError("delta > 1 requires pi_mode 'column' or 'constant'")
        if self.pi_mode == "constant" and not (self.pi_value is not None and 0 <= self.pi_value <= 1):
            raise ConfigError("pi_mode 'constant' needs pi_value in [0, 1]")

    @classmethod
    def from_text(cls, f_text: str, link: str = "identity", delta: int = 1, pi_mode: str | None = None,
                  pi_value: float | None = None) -> "CeeModel":
        """``"1 + t"`` style feature list."""
        items = [s.strip() for s in f_text.split("+")]
        for s in items:
            if not re.fullmatch(r"1|[A-Za-z_][A-Za-z0-9_.]*", s):
                raise ConfigError(f"bad feature {s!r} in {f_text!r}")
        if pi_mode is None:
            pi_mode = "irrelevant" if delta == 1 else ("constant" if pi_value is not None else "column")
        return cls(link=link, f_spec=tuple(items), delta=delta, pi_mode=pi_mode, pi_value=pi_value)

    @property
    def p(self) -> int:
        return len(self.f_spec)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple("(Intercept)" if f == "1" else f if isinstance(f, str) else f[0] for f in self.f_spec)

    def features(self, panel: MrtPanel) -> np.ndarray:
        cols = []
        for f in self.f_spec:
            if f == "1":
                cols.append(np.ones(panel.N))
            elif f == "t":
                cols.append(panel.t.astype(float))
            elif isinstance(f, str):
                cols.append(panel.covariate(f))
            else:
                name, fn = f
                covs = dict(zip(panel.covariate_names, panel.covariates.T))
                cols.append(np.asarray(fn(panel.t.astype(float), covs), dtype=float).reshape(panel.N))
        F = np.column_stack(cols)
        if not np.all(np.isfinite(F)):
            raise DataError("effect-model features are not finite on every record")
        return F


# --- nuisance containers ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """Nuisances evaluated on every panel row.

    ``mask`` optionally multiplies each row's contribution (e.g. the
    complete-case indicator); ``None`` means all ones.
    """

    e: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    ptilde: np.ndarray
    mask: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    e_fit: object
    mu_fit: object
    ptilde_fit: object

    def evaluate(self, panel: MrtPanel) -> NuisanceValues:
        v = panel.variables()
        return NuisanceValues(
            e=self.e_fit.predict(v),
            mu1=self.mu_fit.predict_arm(v, 1),
            mu0=self.mu_fit.predict_arm(v, 0),
            ptilde=self.ptilde_fit.predict(v),
        )

    def summary(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("e_fit", "mu_fit", "ptilde_fit")}


def _values(panel, nuisances) -> NuisanceValues:
    return nuisances.evaluate(panel) if hasattr(nuisances, "evaluate") else nuisances


# --- weights --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeightSet:
    w_t: np.ndarray
    w_t_delta: np.ndarray


def compute_weights(panel: MrtPanel, ptilde, model: CeeModel) -> WeightSet:
    """Stabilized weights and future-treatment change-of-measure weights."""
    if hasattr(ptilde, "predict"):
        ptilde = ptilde.predict(panel.variables())
    pt = np.broadcast_to(np.asarray(ptilde, dtype=float), (panel.N,))
    on = panel.avail == 1
    A = panel.treat.astype(float)
    p = panel.prob_treat
    if np.any(on & ((p <= 0) | (p >= 1))):
        raise DataError("randomization probability must lie strictly in (0, 1) on available records")
    if np.any(on & ((pt <= 0) | (pt >= 1))):
        raise DataError("numerator probability must lie strictly in (0, 1)")
    w = np.zeros(panel.N)
    ps = np.where(on, p, 0.5)
    w[on] = np.where(A == 1, pt / ps, (1 - pt) / (1 - ps))[on]

    wd = np.ones(panel.N)
    if model.delta > 1:
        if model.pi_mode == "column":
            if panel.pi_prob is None:
                raise DataError("delta > 1 with pi_mode 'column' requires a pi_prob column")
            pi = panel.pi_prob
        else:
            pi = np.where(on, float(model.pi_value), 0.0)
        fac = np.where(A == 1, np.where(on, pi / ps, 1.0), (1 - pi) / (1 - np.where(on, p, 0.0)))
        fac = fac.reshape(panel.n, panel.T)
        out = np.ones_like(fac)
        # u = t+1 .. t+delta-1, truncated at T
        for lag in range(1, model.delta):
            if lag < panel.T:
                out[:, :-lag] *= fac[:, lag:]
        wd = out.reshape(-1)
    return WeightSet(w_t=w, w_t_delta=wd)


# --- residuals and per-record estimating function ----------------------------------


def residual_identity(y, a, p, mu1, mu0, fbeta):
    return y - (a + p - 1) * fbeta - (1 - p) * mu1 - p * mu0


def residual_log(y, a, p, mu1, mu0, fbeta):
    with np.errstate(over="raise"):
        try:
            return np.exp(-a * fbeta) * y - (1 - p) * np.exp(-fbeta) * mu1 - p * mu0
        except FloatingPointError:
            raise NumericalError("overflow in exp(-f'beta)") from None


def utilde(y, a, p, r, e, mu1, mu0, ptilde, f, beta, link="identity", w_t=None, w_t_delta=1.0, avail=1):
    """Augmented estimating function for one record (``f`` a p-vector).

    ``y`` may be ``None`` or ``nan`` when ``r = 0``. ``w_t`` defaults to the
    stabilized weight implied by ``a``, ``p`` and ``ptilde``.
    """
    f = np.asarray(f, dtype=float)
    if not avail:
        return np.zeros_like(f)
    if w_t is None:
        w_t = ptilde / p if a else (1 - ptilde) / (1 - p)
    if r:
        if y is None or not np.isfinite(y):
            raise DataError("observed record (R=1) has no outcome")
        if e <= 0:
            raise DataError("missingness probability must be positive")
        res = (y - a * mu1 - (1 - a) * mu0) / e
    else:
        res = 0.0
    fb = float(f @ np.asarray(beta, dtype=float))
    aug = a + p - 1
    if link == "identity":
        core = res + aug * (mu1 - mu0 - fb)
    else:
        core = res * np.exp(-a * fb) + aug * (np.exp(-fb) * mu1 - mu0)
    return w_t * w_t_delta * core * (a - ptilde) * f


@dataclass(frozen=True, eq=False)
class _Prepared:
    """Row-level pieces that do not depend on beta."""

    F: np.ndarray
    base: np.ndarray  # I W W_delta (A - ptilde) * mask
    res: np.ndarray  # (R/e)(Y - A mu1 - (1-A) mu0), zero when R = 0
    aug: np.ndarray  # A + p - 1
    A: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    link: str
    n: int
    T: int


def _prepare(panel: MrtPanel, nv: NuisanceValues, model: CeeModel, weights: WeightSet | None = None) -> _Prepared:
    if weights is None:
        weights = compute_weights(panel, nv.ptilde, model)
    on = panel.avail == 1
    A = panel.treat.astype(float)
    R = panel.obs_flag == 1
    base = np.where(on, weights.w_t * weights.w_t_delta * (A - nv.ptilde), 0.0)
    if nv.mask is not None:
        base = base * nv.mask
    live = base != 0
    if np.any(live & R & ~(nv.e > 0)):
        raise DataError("missingness probability must be positive on observed records")
    Y = np.where(R, panel.outcome, 0.0)
    mu1 = np.where(on, nv.mu1, 0.0)
    mu0 = np.where(on, nv.mu0, 0.0)
    e = np.where(R & live, nv.e, 1.0)
    res = np.where(R & live, (Y - A * mu1 - (1 - A) * mu0) / e, 0.0)
    aug = np.where(on, A + panel.prob_treat - 1, 0.0)
    return _Prepared(model.features(panel), base, res, aug, A, mu1, mu0, model.link, panel.n, panel.T)


def _core(pp: _Prepared, beta):
    """Bracketed scalar per row and its derivative factor in f'beta."""
    fb = pp.F @ beta
    if pp.link == "identity":
        core = pp.res + pp.aug * (pp.mu1 - pp.mu0 - fb)
        dcore = -pp.aug
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            ea = np.exp(-pp.A * fb)
            e1 = np.exp(-fb)
            core = pp.res * ea + pp.aug * (e1 * pp.mu1 - pp.mu0)
            dcore = -pp.A * pp.res * ea - pp.aug * e1 * pp.mu1
        # rows with base == 0 must not poison sums with inf * 0
        core = np.where(pp.base != 0, core, 0.0)
        dcore = np.where(pp.base != 0, dcore, 0.0)
    return core, dcore


def _rows(pp: _Prepared, beta) -> np.ndarray:
    core, _ = _core(pp, beta)
    return (pp.base * core)[:, None] * pp.F


def _per_individual(pp: _Prepared, rows: np.ndarray) -> np.ndarray:
    return rows.reshape(pp.n, pp.T, -1).sum(axis=1)


def _total(pp: _Prepared, beta) -> np.ndarray:
    return _per_individual(pp, _rows(pp, beta)).mean(axis=0)


def _jacobian(pp: _Prepared, beta) -> np.ndarray:
    _, dcore = _core(pp, beta)
    wrow = pp.base * dcore
    return (pp.F * wrow[:, None]).T @ pp.F / pp.n


def utilde_rows(panel, nuisances, beta, model, weights=None) -> np.ndarray:
    """(N, p) matrix of per-record estimating-function values."""
    pp = _prepare(panel, _values(panel, nuisances), model, weights)
    return _rows(pp, np.asarray(beta, dtype=float))


def estfn_individual(panel, nuisances, beta, model, weights=None) -> np.ndarray:
    """(n, p) per-individual sums over decision points."""
    pp = _prepare(panel, _values(panel, nuisances), model, weights)
    return _per_individual(pp, _rows(pp, np.asarray(beta, dtype=float)))


def estfn_total(panel, nuisances, beta, model, weights=None) -> np.ndarray:
    """Average over individuals of the per-individual sum of the estimating function."""
    pp = _prepare(panel, _values(panel, nuisances), model, weights)
    return _total(pp, np.asarray(beta, dtype=float))


def estfn_jacobian(panel, nuisances, beta, model, weights=None) -> np.ndarray:
    """Analytic derivative of :func:`estfn_total` with respect to beta."""
    pp = _prepare(panel, _values(panel, nuisances), model, weights)
    return _jacobian(pp, np.asarray(beta, dtype=float))


# --- solvers ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CeeEstimate:
    beta: np.ndarray
    feature_names: tuple
    solver: str
    iterations: int
    final_estfn_norm: float
    n: int
    vcov: np.ndarray | None = None
    variance_mode: str | None = None
    trace: tuple = ()
    min_e: float | None = None
    nuisance_summary: dict = field(default_factory=dict, repr=False)
    notes: tuple = ()

    @property
    def se(self) -> np.ndarray:
        if self.vcov is None:
            raise ValueError("covariance not computed")
        return np.sqrt(np.diag(self.vcov))

    def ci(self, level: float = 0.95):
        from .variance import wald_ci

        return wald_ci(self.beta, self.vcov, level)

    def to_dict(self, level: float = 0.95) -> dict:
        out = {
            "feature_names": list(self.feature_names),
            "beta": self.beta.tolist(),
            "n": self.n,
            "solver": {"method": self.solver, "iterations": self.iterations,
                       "final_estfn_norm": self.final_estfn_norm, "trace": list(self.trace)},
            "min_e": self.min_e,
            "notes": list(self.notes),
            "nuisance": self.nuisance_summary,
        }
        if self.vcov is not None:
            lo, hi = self.ci(level)
            out.update(vcov=self.vcov.tolist(), se=self.se.tolist(), ci_low=lo.tolist(), ci_high=hi.tolist(),
                       ci_level=level, variance_mode=self.variance_mode)
        return out


def _solve_identity_pp(pp: _Prepared, names) -> CeeEstimate:
    M = -_jacobian(pp, np.zeros(pp.F.shape[1]))
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise EstimabilityError(
            f"effect model not estimable (condition number {cond:.3g}); try fewer features in f"
        )
    b = _total(pp, np.zeros(pp.F.shape[1]))
    beta = np.linalg.solve(M, b)
    # one step of iterative refinement
    beta = beta + np.linalg.solve(M, _total(pp, beta))
    norm = float(np.max(np.abs(_total(pp, beta))))
    return CeeEstimate(beta=beta, feature_names=names, solver="closed_form", iterations=1,
                       final_estfn_norm=norm, n=pp.n)


def _newton(pp: _Prepared, names, init, tol, max_iter) -> CeeEstimate:
    beta = np.array(init, dtype=float)
    g = _total(pp, beta)
    if not np.all(np.isfinite(g)):
        raise NonConvergenceError("estimating function not finite at the initial value")
    trace = [{"iter": 0, "beta": beta.tolist(), "norm": float(np.max(np.abs(g)))}]
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            return CeeEstimate(beta=beta, feature_names=names, solver="newton", iterations=it - 1,
                               final_estfn_norm=float(np.max(np.abs(g))), n=pp.n, trace=tuple(trace))
        J = _jacobian(pp, beta)
        try:
            step = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            raise SingularityError("singular Jacobian in Newton iteration") from None
        if not np.all(np.isfinite(step)):
            raise SingularityError("singular Jacobian in Newton iteration")
        norm = float(np.linalg.norm(g))
        size = 1.0
        for _ in range(60):
            cand = beta + size * step
            g_new = _total(pp, cand)
            if np.all(np.isfinite(g_new)) and np.linalg.norm(g_new) < norm:
                break
            size /= 2
        else:
            raise NonConvergenceError("step-halving could not reduce the estimating function", trace)
        beta, g = cand, g_new
        trace.append({"iter": it, "beta": beta.tolist(), "norm": float(np.max(np.abs(g))), "step": size})
    if np.max(np.abs(g)) < tol:
        return CeeEstimate(beta=beta, feature_names=names, solver="newton", iterations=max_iter,
                           final_estfn_norm=float(np.max(np.abs(g))), n=pp.n, trace=tuple(trace))
    raise NonConvergenceError(f"Newton did not converge in {max_iter} iterations", trace)


def solve_identity(panel, nuisances, model, weights=None) -> CeeEstimate:
    """Closed-form root of the (linear in beta) identity-link estimating equation."""
    if model.link != "identity":
        raise ConfigError("solve_identity needs an identity-link model")
    pp = _prepare(panel, _values(panel, nuisances), model, weights)
    return _solve_identity_pp(pp, model.feature_names)


def solve_log(panel, nuisances, model, init=None, tol: float = 1e-10, max_iter: int = 100,
              weights=None) -> CeeEstimate:
    """Newton iterations with step-halving for the log-link estimating equation."""
    if model.link != "log":
        raise ConfigError("solve_log needs a log-link model")
    pp = _prepare(panel, _values(panel, nuisances), model, weights)
    init = np.zeros(model.p) if init is None else np.asarray(init, dtype=float)
    return _newton(pp, model.feature_names, init, tol, max_iter)


def solve(panel, nuisances, model, weights=None, **kw) -> CeeEstimate:
    if model.link == "identity":
        return solve_identity(panel, nuisances, model, weights)
    return solve_log(panel, nuisances, model, weights=weights, **kw)


# --- full-data estimator (no missingness) ------------------------------------------


def complete_data_estimate(panel, mu, ptilde, model, include=None, tol=1e-10, max_iter=100) -> CeeEstimate:
    """Two-stage estimator for fully observed outcomes, written with the residual form.

    ``mu`` and ``ptilde`` are fitted predictors or constants. ``include``
    restricts the sum to a subset of records (e.g. complete cases).
    """
    on = panel.avail == 1
    R = panel.obs_flag == 1
    keep = on if include is None else on & (np.asarray(include) != 0)
    if np.any(keep & ~R):
        raise DataError("complete-data estimator needs observed outcomes on every included record")
    v = panel.variables()
    pr = lambda f, arm=None: f.predict(v) if arm is None else f.predict_arm(v, arm)  # noqa: E731
    mu1, mu0 = pr(mu, 1), pr(mu, 0)
    pt = pr(ptilde)
    w = compute_weights(panel, pt, model)
    F = model.features(panel)
    A = panel.treat.astype(float)
    p = panel.prob_treat
    Y = np.where(R, panel.outcome, 0.0)
    c = np.where(keep, w.w_t * w.w_t_delta * (A - pt), 0.0)
    n = panel.n

    def total(beta):
        fb = F @ beta
        if model.link == "identity":
            eps = residual_identity(Y, A, p, mu1, mu0, fb)
        else:
            eps = residual_log(Y, A, p, mu1, mu0, fb)
        return ((c * np.where(keep, eps, 0.0))[:, None] * F).sum(axis=0) / n

    if model.link == "identity":
        M = (F * (c * (A + p - 1))[:, None]).T @ F / n
        if np.linalg.cond(M) > COND_LIMIT:
            raise EstimabilityError("effect model not estimable")
        beta = np.linalg.solve(M, total(np.zeros(model.p)))
        beta = beta + np.linalg.solve(M, total(beta))
        return CeeEstimate(beta=beta, feature_names=model.feature_names, solver="closed_form", iterations=1,
                           final_estfn_norm=float(np.max(np.abs(total(beta)))), n=n)
    beta = np.zeros(model.p)
    for it in range(max_iter):
        g = total(beta)
        if np.max(np.abs(g)) < tol:
            return CeeEstimate(beta=beta, feature_names=model.feature_names, solver="newton", iterations=it,
                               final_estfn_norm=float(np.max(np.abs(g))), n=n)
        fb = F @ beta
        d = -A * np.exp(-A * fb) * Y + (1 - p) * np.exp(-fb) * mu1  # d eps / d(f'beta)
        J = (F * (c * d)[:, None]).T @ F / n
        step = np.linalg.solve(J, -g)
        size = 1.0
        while np.linalg.norm(total(beta + size * step)) >= np.linalg.norm(g) and size > 1e-12:
            size /= 2
        beta = beta + size * step
    raise NonConvergenceError("complete-data Newton did not converge")


# --- stage 1 + orchestration ----------------------------------------------------------


@dataclass(frozen=True)
class Stage1Config:
    """How to fit the missingness model, outcome regression and numerator probability.

    ``mu_formula=None`` fixes the outcome regression at zero and
    ``e_formula=None`` is only allowed when no available outcome is missing.
    """

    e_formula: str | FormulaSpec | None = None
    mu_formula: str | FormulaSpec | None = None
    ptilde: float | str | FormulaSpec | None = None
    engine: str = "gam"
    mu_family: str = "gaussian"
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    variance: str = "auto"
    clip: float = CLIP

    def __post_init__(self):
        if self.engine not in ("gam", "glm"):
            raise ConfigError(f"engine must be 'gam' or 'glm', got {self.engine!r}")
        if self.variance not in ("auto", "parametric", "nonparametric"):
            raise ConfigError(f"unknown variance mode {self.variance!r}")

    def spec(self, which: str) -> FormulaSpec | None:
        f = self.e_formula if which == "e" else self.mu_formula
        family = "binomial" if which == "e" else self.mu_family
        if f is None:
            return None
        if isinstance(f, str):
            return parse_formula(f, family)
        return FormulaSpec(f.terms, family, f.response)


def fit_stage1(panel: MrtPanel, cfg: Stage1Config) -> NuisanceSet:
    on = panel.avail == 1
    R = panel.obs_flag == 1
    v = panel.variables()
    if not np.any(on & R):
        raise DataError("no observed outcomes on available decision points")
    e_spec = cfg.spec("e")
    if np.all(R[on]):
        e_fit = ConstantPredictor(1.0)
    elif e_spec is None:
        raise ConfigError("outcomes are missing: a missingness model (e_formula) is required")
    else:
        sub = {k: x[on] for k, x in v.items()}
        e_fit = fit_formula(sub, R[on].astype(float), e_spec, cfg.engine, cfg.lambda_grid, clip=cfg.clip)
    mu_spec = cfg.spec("mu")
    if mu_spec is None:
        mu_fit = ConstantPredictor(0.0)
    else:
        keep = on & R
        sub = {k: x[keep] for k, x in v.items()}
        mu_fit = fit_formula(sub, panel.outcome[keep], mu_spec, cfg.engine, cfg.lambda_grid, clip=cfg.clip)
    ptilde_fit = fit_numerator(panel, cfg.ptilde)
    return NuisanceSet(e_fit, mu_fit, ptilde_fit)


def resolve_variance_mode(cfg: Stage1Config, nuisances: NuisanceSet) -> str:
    if cfg.variance != "auto":
        return cfg.variance
    fits = (nuisances.e_fit, nuisances.mu_fit)
    return "nonparametric" if any(getattr(f, "penalized", False) for f in fits) or cfg.engine == "gam" \
        else "parametric"


def estimate_cee(panel: MrtPanel, model: CeeModel, stage1: Stage1Config, nuisances: NuisanceSet | None = None,
                 **solver_kw) -> CeeEstimate:
    """Stage 1 nuisance fits, stage 2 root finding, then the sandwich covariance."""
    from .variance import sandwich_nonparametric, sandwich_parametric

    if nuisances is None:
        nuisances = fit_stage1(panel, stage1)
    nv = nuisances.evaluate(panel)
    on = panel.avail == 1
    min_e = float(nv.e[on].min())
    notes = []
    if min_e < E_WARN:
        msg = f"minimum fitted missingness probability {min_e:.3g} < {E_WARN}; positivity may be violated"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    weights = compute_weights(panel, nv.ptilde, model)
    est = solve(panel, nv, model, weights, **solver_kw)
    mode = resolve_variance_mode(stage1, nuisances)
    if mode == "parametric":
        vcov = sandwich_parametric(panel, nuisances, est.beta, model)
    else:
        vcov = sandwich_nonparametric(panel, nv, est.beta, model, weights)
    return replace(est, vcov=vcov, variance_mode=mode, min_e=min_e, notes=tuple(notes),
                   nuisance_summary=nuisances.summary())
