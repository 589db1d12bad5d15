"""Stage-1 nuisance regressions: GLMs by IRLS and P-spline additive models.

Penalized fits minimise ``deviance / 2 + sum_j lambda_j g_j' P_j g_j / 2`` so
that the gaussian solution is ``(X'WX + S)^{-1} X'Wy`` with ``S`` the
block-diagonal penalty. Smoothing parameters are chosen by GCV over a grid; a
single multiplier is shared by every smooth in the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg import qr as pivoted_qr
from scipy.special import expit

from .errors import ConfigError, NonConvergenceError, SingularityError
from .formula import Design, DesignInfo, FormulaSpec, build_design, parse_formula

CLIP = 1e-6
SCORE_TOL = 1e-8
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-4, 4, 30))


def _n(variables) -> int:
    return len(next(iter(variables.values())))


@dataclass(frozen=True)
class ConstantPredictor:
    """A nuisance fixed at a known value (e.g. a design probability)."""

    value: float

    estfn_dim = 0
    penalized = False

    def predict(self, variables) -> np.ndarray:
        return np.full(_n(variables), float(self.value))

    def predict_arm(self, variables, arm) -> np.ndarray:
        return self.predict(variables)

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": float(self.value)}


@dataclass(frozen=True, eq=False)
class FittedNuisance:
    coefficients: np.ndarray
    family: str
    info: DesignInfo | None = None
    column_names: tuple = ()
    lam: dict | None = None
    penalty: np.ndarray | None = None
    clip: float = CLIP
    iterations: int = 0
    trace: tuple = ()
    gcv: float | None = None
    edf: float | None = None
    gcv_path: tuple = field(default=(), repr=False)

    @property
    def spec(self) -> FormulaSpec | None:
        return None if self.info is None else self.info.spec

    @property
    def estfn_dim(self) -> int:
        return len(self.coefficients)

    @property
    def penalized(self) -> bool:
        return self.penalty is not None and bool(np.any(self.penalty))

    def design(self, variables, arm: int | None = None) -> np.ndarray:
        if self.info is None:
            raise ConfigError("fit was made on a raw matrix and cannot rebuild its design")
        return self.info.transform(variables, arm)

    def inverse_link(self, eta, clip: bool = True) -> np.ndarray:
        if self.family == "gaussian":
            return eta
        mu = expit(eta)
        return np.clip(mu, self.clip, 1 - self.clip) if clip else mu

    def predict(self, variables) -> np.ndarray:
        return self.inverse_link(self.design(variables) @ self.coefficients)

    def predict_arm(self, variables, arm: int) -> np.ndarray:
        return self.inverse_link(self.design(variables, arm) @ self.coefficients)

    def to_dict(self) -> dict:
        return {
            "kind": "fit",
            "family": self.family,
            "coefficients": self.coefficients.tolist(),
            "column_names": list(self.column_names),
            "lambda": self.lam,
            "edf": self.edf,
            "gcv": self.gcv,
            "iterations": self.iterations,
            "clip": self.clip,
            "design": None if self.info is None else self.info.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FittedNuisance":
        info = None if d.get("design") is None else DesignInfo.from_dict(d["design"])
        lam = d.get("lambda")
        penalty = None
        if info is not None and lam:
            penalty = info.penalty([lam[b.term.label()] for b in info.penalized_blocks])
        return cls(
            coefficients=np.asarray(d["coefficients"], dtype=float),
            family=d["family"],
            info=info,
            column_names=tuple(d.get("column_names", ())),
            lam=lam,
            penalty=penalty,
            clip=d.get("clip", CLIP),
            iterations=d.get("iterations", 0),
            gcv=d.get("gcv"),
            edf=d.get("edf"),
        )


def predict_arm(fit, variables: Mapping[str, np.ndarray], arm: int) -> np.ndarray:
    """Predictions with the treatment set to ``arm`` for every row."""
    return fit.predict_arm(variables, arm)


# --- linear algebra -------------------------------------------------------------


def _as_design(design) -> Design:
    if isinstance(design, Design):
        return design
    X = np.asarray(design, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be a 2-d matrix")
    return Design(matrix=X)


def check_rank(design: Design, tol: float = 1e-9) -> None:
    X = design.matrix
    if X.shape[0] < X.shape[1]:
        raise SingularityError(f"design has {X.shape[0]} rows but {X.shape[1]} columns")
    _, R, piv = pivoted_qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * max(d[0], 1e-300))) if d.size else 0
    if rank < X.shape[1]:
        bad = [design.column_names[j] for j in piv[rank:]]
        raise SingularityError(f"design is rank deficient ({rank} < {X.shape[1]}); collinear columns: {bad}")


def _pwls_qr(R, qz, E):
    """Solve min ||qz - R g||^2 + ||E g||^2; returns (g, edf)."""
    p = R.shape[1]
    M = np.vstack([R, E]) if E.shape[0] else R
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[-1] <= s[0] * 1e-13:
        raise SingularityError("penalized normal equations are singular")
    U1 = U[:p]
    g = Vt.T @ ((U1.T @ qz) / s)
    return g, float(np.sum(U1 * U1))


def _pwls(Xw, zw, E):
    Q, R = np.linalg.qr(Xw)
    return _pwls_qr(R, Q.T @ zw, E)


def _binomial_deviance(y, mu, w):
    mu = np.clip(mu, 1e-300, 1 - 1e-16)
    ll = np.where(y > 0, np.log(mu), np.log1p(-mu))
    return float(-2.0 * np.sum(w * ll))


def _irls_binomial(X, y, w, E, init=None, max_iter=100, tol=SCORE_TOL):
    """Penalized Newton/IRLS for logistic regression. ``E`` is the penalty root."""
    S = E.T @ E
    if init is None:
        mu0 = (w * y + 0.5) / (w + 1.0)
        eta = np.log(mu0 / (1 - mu0))
        sw = np.sqrt(w)
        g, _ = _pwls(X * sw[:, None], sw * eta, E)
    else:
        g = np.array(init, dtype=float)
    trace = []

    def objective(g):
        mu = expit(X @ g)
        return _binomial_deviance(y, mu, w) + g @ S @ g, mu

    obj, mu = objective(g)
    for it in range(1, max_iter + 1):
        grad = X.T @ (w * (y - mu)) - S @ g
        gmax = float(np.max(np.abs(grad))) if grad.size else 0.0
        trace.append({"iter": it - 1, "objective": obj, "max_score": gmax})
        if gmax < tol:
            v = np.maximum(mu * (1 - mu), 1e-12)
            sw = np.sqrt(w * v)
            _, edf = _pwls(X * sw[:, None], sw * (X @ g), E)
            return g, mu, edf, it - 1, trace
        v = np.maximum(mu * (1 - mu), 1e-12)
        z = X @ g + (y - mu) / v
        sw = np.sqrt(w * v)
        g_new, edf = _pwls(X * sw[:, None], sw * z, E)
        step = g_new - g
        for _ in range(30):
            new_obj, new_mu = objective(g + step)
            if np.isfinite(new_obj) and new_obj <= obj + 1e-12 * (abs(obj) + 1):
                break
            step = step / 2
        else:
            raise NonConvergenceError("IRLS step-halving failed to decrease the deviance", trace)
        if np.max(np.abs(X @ (g + step))) > 50:
            trace.append({"iter": it, "objective": new_obj, "max_score": None})
            raise NonConvergenceError("IRLS diverging: fitted probabilities at 0/1 (separation?)", trace)
        stalled = abs(obj - new_obj) <= 1e-15 * abs(obj) and np.max(np.abs(step)) <= 1e-10 * (1 + np.max(np.abs(g)))
        g, obj, mu = g + step, new_obj, new_mu
        if stalled and E.shape[0]:
            # very large penalties put a roundoff floor under S g; accept the fixed point
            v = np.maximum(mu * (1 - mu), 1e-12)
            sw = np.sqrt(w * v)
            _, edf = _pwls(X * sw[:, None], sw * (X @ g), E)
            trace.append({"iter": it, "objective": obj, "max_score": gmax, "stalled": True})
            return g, mu, edf, it, trace
    raise NonConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)


def _prior_weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a nonnegative finite vector, one per row")
    return w


def _check_response(y, family):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    if family == "binomial" and not np.all((y == 0) | (y == 1)):
        raise ValueError("binomial response must be 0/1")
    if family not in ("gaussian", "binomial"):
        raise ConfigError(f"unknown family {family!r}")
    return y


def fit_glm(design, response, family: str = "gaussian", weights=None, *, max_iter: int = 100,
            tol: float = SCORE_TOL, clip: float = CLIP) -> FittedNuisance:
    """Unpenalized GLM: least squares (gaussian) or logistic IRLS (binomial)."""
    design = _as_design(design)
    X = design.matrix
    y = _check_response(response, family)
    w = _prior_weights(weights, len(y))
    check_rank(Design(X * np.sqrt(w)[:, None], column_names=design.column_names))
    E = np.zeros((0, X.shape[1]))
    if family == "gaussian":
        sw = np.sqrt(w)
        g, edf = _pwls(X * sw[:, None], sw * y, E)
        its, trace = 0, ()
    else:
        g, _, edf, its, trace = _irls_binomial(X, y, w, E, max_iter=max_iter, tol=tol)
    return FittedNuisance(
        coefficients=g, family=family, info=design.info, column_names=design.column_names,
        clip=clip, iterations=its, trace=tuple(trace), edf=edf,
    )


def fit_pspline_gam(design, response, family: str = "gaussian", lambda_grid=DEFAULT_LAMBDA_GRID,
                    weights=None, *, max_iter: int = 100, tol: float = SCORE_TOL,
                    clip: float = CLIP) -> FittedNuisance:
    """Penalized additive model with the smoothing multiplier picked by GCV.

    GCV is ``N * D / (N - edf)^2`` with ``D`` the (weighted) residual sum of
    squares or binomial deviance. A grid of one value skips selection.
    """
    design = _as_design(design)
    if design.info is None:
        raise ConfigError("fit_pspline_gam needs a design built by build_design")
    grid = np.sort(np.asarray(list(lambda_grid), dtype=float))
    if grid.size == 0 or np.any(grid < 0):
        raise ConfigError("lambda_grid must be a nonempty set of nonnegative values")
    info = design.info
    blocks = info.penalized_blocks
    if not blocks:
        return fit_glm(design, response, family, weights, max_iter=max_iter, tol=tol, clip=clip)
    X = design.matrix
    y = _check_response(response, family)
    w = _prior_weights(weights, len(y))
    N = float(np.sum(w > 0))
    sw = np.sqrt(w)

    fits = []
    if family == "gaussian":
        Q, R = np.linalg.qr(X * sw[:, None])
        qz = Q.T @ (sw * y)
        for lam in grid:
            E = info.penalty_root([lam] * len(blocks))
            try:
                g, edf = _pwls_qr(R, qz, E)
            except SingularityError:
                continue
            rss = float(np.sum(w * (y - X @ g) ** 2))
            fits.append((lam, g, edf, N * rss / max(N - edf, 1e-8) ** 2, 0, ()))
    else:
        init = None
        failures = []
        for lam in grid:
            E = info.penalty_root([lam] * len(blocks))
            try:
                g, mu, edf, its, trace = _irls_binomial(X, y, w, E, init=init, max_iter=max_iter, tol=tol)
            except (NonConvergenceError, SingularityError) as exc:
                failures.append({"lambda": float(lam), "error": str(exc)})
                continue
            init = g
            dev = _binomial_deviance(y, mu, w)
            fits.append((lam, g, edf, N * dev / max(N - edf, 1e-8) ** 2, its, tuple(trace)))
        if not fits:
            raise NonConvergenceError("penalized IRLS failed for every lambda in the grid", failures)
    if not fits:
        raise SingularityError("penalized system singular for every lambda in the grid")
    best = min(range(len(fits)), key=lambda k: (fits[k][3], k))
    lam, g, edf, gcv, its, trace = fits[best]
    lams = [lam] * len(blocks)
    return FittedNuisance(
        coefficients=g, family=family, info=info, column_names=design.column_names,
        lam={b.term.label(): float(lam) for b in blocks},
        penalty=info.penalty(lams), clip=clip, iterations=its, trace=trace,
        gcv=gcv, edf=edf, gcv_path=tuple((float(f[0]), float(f[3])) for f in fits),
    )


def fit_formula(variables, response, spec: FormulaSpec | str, engine: str = "gam",
                lambda_grid=DEFAULT_LAMBDA_GRID, family: str | None = None, clip: float = CLIP):
    """Build the design for ``spec`` on ``variables`` and fit it with ``engine``."""
    if isinstance(spec, str):
        spec = parse_formula(spec, family or "gaussian")
    design = build_design(variables, spec)
    if engine == "gam":
        return fit_pspline_gam(design, response, spec.family, lambda_grid, clip=clip)
    if engine == "glm":
        return fit_glm(design, response, spec.family, clip=clip)
    raise ConfigError(f"unknown engine {engine!r}")


def fit_numerator(panel, s_features=None, engine: str = "glm", lambda_grid=DEFAULT_LAMBDA_GRID):
    """Numerator probability for the stabilized weights, fitted on available rows.

    ``s_features`` may be a constant in (0, 1), a formula (text or spec) for a
    logistic model of the treatment, or ``None`` for the empirical treatment
    rate among available decision points.
    """
    if s_features is None:
        on = panel.avail == 1
        if not on.any():
            raise ValueError("no available decision points")
        return ConstantPredictor(float(panel.treat[on].mean()))
    if isinstance(s_features, (int, float)):
        if not 0 < s_features < 1:
            raise ConfigError(f"numerator probability must lie in (0, 1), got {s_features}")
        return ConstantPredictor(float(s_features))
    spec = parse_formula(s_features, "binomial") if isinstance(s_features, str) else s_features
    if spec.uses_treatment:
        raise ConfigError("numerator model cannot use the treatment as a predictor")
    spec = FormulaSpec(spec.terms, "binomial", spec.response)
    on = panel.avail == 1
    variables = {k: v[on] for k, v in panel.variables().items()}
    return fit_formula(variables, panel.treat[on].astype(float), spec, engine, lambda_grid)
