"""Sandwich covariance for the stage-2 estimate and Wald intervals.

Two regimes. With nonparametric (penalized) stage-1 fits the nuisances are
treated as fixed and the bread is the derivative of the estimating function in
beta. With parametric stage-1 fits the GLM score equations are stacked under
the estimating function and the beta block of the stacked sandwich is used;
the cross derivatives with respect to the nuisance coefficients are analytic
by default, with central finite differences available as a check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import ConfigError, NumericalError, SingularityError
from .estimator import (
    NuisanceSet,
    NuisanceValues,
    _jacobian,
    _per_individual,
    _prepare,
    _rows,
    _values,
    compute_weights,
)
from .nuisance import FittedNuisance


@dataclass(frozen=True, eq=False)
class SandwichParts:
    bread: np.ndarray
    meat: np.ndarray
    n: int
    layout: dict = field(default_factory=dict)  # block name -> slice


def _inv(B):
    try:
        Binv = np.linalg.inv(B)
    except np.linalg.LinAlgError:
        raise SingularityError("sandwich bread is singular") from None
    if not np.all(np.isfinite(Binv)):
        raise SingularityError("sandwich bread is singular")
    return Binv


def sandwich(parts: SandwichParts, block: slice | None = None) -> np.ndarray:
    """(1/n) B^{-1} M B^{-T}, optionally restricted to ``block``."""
    Binv = _inv(parts.bread)
    V = Binv @ parts.meat @ Binv.T / parts.n
    V = (V + V.T) / 2
    if block is not None:
        V = V[block, block]
    return V


def nonparametric_parts(panel, nuisances, beta_hat, model, weights=None) -> SandwichParts:
    nv = _values(panel, nuisances)
    pp = _prepare(panel, nv, model, weights)
    beta = np.asarray(beta_hat, dtype=float)
    U = _per_individual(pp, _rows(pp, beta))
    return SandwichParts(
        bread=_jacobian(pp, beta),
        meat=U.T @ U / pp.n,
        n=pp.n,
        layout={"beta": slice(0, len(beta))},
    )


def sandwich_nonparametric(panel, nuisances, beta_hat, model, weights=None) -> np.ndarray:
    """Plug-in sandwich with nuisances held at their fitted values."""
    return sandwich(nonparametric_parts(panel, nuisances, beta_hat, model, weights))


def _fd_jacobian(fun, x, rel_step=1e-6):
    """Central differences: column j is d fun / d x_j."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(len(x)):
        h = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fun(xp) - fun(xm)) / (2 * h))
    return np.column_stack(cols) if cols else np.zeros((len(fun(x)), 0))


class _Stacked:
    """Stacked estimating function (U-tilde, score_e, score_mu) per individual."""

    def __init__(self, panel, nuisances: NuisanceSet, model, weights=None, mask=None):
        self.panel, self.model, self.mask = panel, model, mask
        v = panel.variables()
        on = panel.avail == 1
        R = panel.obs_flag == 1
        self.e_fit = nuisances.e_fit if isinstance(nuisances.e_fit, FittedNuisance) else None
        self.mu_fit = nuisances.mu_fit if isinstance(nuisances.mu_fit, FittedNuisance) else None
        if self.e_fit and self.e_fit.family != "binomial":
            raise ConfigError("stacked sandwich needs a logistic missingness fit")
        self.pt = nuisances.ptilde_fit.predict(v)
        self.weights = weights if weights is not None else compute_weights(panel, self.pt, model)
        self.e_const = None if self.e_fit else nuisances.e_fit.predict(v)
        self.mu_const = None if self.mu_fit else nuisances.mu_fit.predict(v)
        if self.e_fit:
            self.Xe = self.e_fit.design(v)
            self.mask_e = on.astype(float)
            self.Se = self.e_fit.penalty if self.e_fit.penalized else np.zeros((self.Xe.shape[1],) * 2)
        if self.mu_fit:
            self.Xm = self.mu_fit.design(v)
            self.Xm1 = self.mu_fit.design(v, 1)
            self.Xm0 = self.mu_fit.design(v, 0)
            self.mask_mu = (on & R).astype(float)
            self.Ym = np.where(R, panel.outcome, 0.0)
            self.Sm = self.mu_fit.penalty if self.mu_fit.penalized else np.zeros((self.Xm.shape[1],) * 2)
        self.R = R.astype(float)
        self.p = model.p
        self.qe = self.e_fit.estfn_dim if self.e_fit else 0
        self.qm = self.mu_fit.estfn_dim if self.mu_fit else 0
        self.layout = {
            "beta": slice(0, self.p),
            "gamma_e": slice(self.p, self.p + self.qe),
            "gamma_mu": slice(self.p + self.qe, self.p + self.qe + self.qm),
        }

    def theta_hat(self, beta):
        parts = [np.asarray(beta, dtype=float)]
        if self.e_fit:
            parts.append(self.e_fit.coefficients)
        if self.mu_fit:
            parts.append(self.mu_fit.coefficients)
        return np.concatenate(parts)

    def split(self, theta):
        L = self.layout
        return theta[L["beta"]], theta[L["gamma_e"]], theta[L["gamma_mu"]]

    def values(self, ge, gm) -> NuisanceValues:
        e = self.e_fit.inverse_link(self.Xe @ ge) if self.e_fit else self.e_const
        if self.mu_fit:
            mu1 = self.mu_fit.inverse_link(self.Xm1 @ gm, clip=False)
            mu0 = self.mu_fit.inverse_link(self.Xm0 @ gm, clip=False)
        else:
            mu1 = mu0 = self.mu_const
        return NuisanceValues(e=e, mu1=mu1, mu0=mu0, ptilde=self.pt, mask=self.mask)

    def utilde_ind(self, theta):
        beta, ge, gm = self.split(theta)
        pp = _prepare(self.panel, self.values(ge, gm), self.model, self.weights)
        return _per_individual(pp, _rows(pp, beta)), pp

    def score_e_ind(self, ge):
        n, T = self.panel.n, self.panel.T
        m = expit(self.Xe @ ge)
        rows = (self.mask_e * (self.R - m))[:, None] * self.Xe
        return rows.reshape(n, T, -1).sum(axis=1) - (self.Se @ ge) / n

    def score_mu_ind(self, gm):
        n, T = self.panel.n, self.panel.T
        m = self.mu_fit.inverse_link(self.Xm @ gm, clip=False)
        rows = (self.mask_mu * (self.Ym - m))[:, None] * self.Xm
        return rows.reshape(n, T, -1).sum(axis=1) - (self.Sm @ gm) / n

    def phi(self, theta):
        U, _ = self.utilde_ind(theta)
        _, ge, gm = self.split(theta)
        blocks = [U]
        if self.e_fit:
            blocks.append(self.score_e_ind(ge))
        if self.mu_fit:
            blocks.append(self.score_mu_ind(gm))
        return np.hstack(blocks)

    def cross_analytic(self, theta) -> dict:
        """d mean(U-tilde) / d gamma for each fitted nuisance, by the chain rule."""
        beta, ge, gm = self.split(theta)
        nv = self.values(ge, gm)
        pp = _prepare(self.panel, nv, self.model, self.weights)
        n = self.panel.n
        live = pp.base != 0
        fb = pp.F @ beta
        if pp.link == "identity":
            ea = e1 = np.ones_like(fb)
        else:
            with np.errstate(over="ignore"):
                ea = np.where(live, np.exp(-pp.A * np.where(live, fb, 0.0)), 0.0)
                e1 = np.where(live, np.exp(-np.where(live, fb, 0.0)), 0.0)
        r_over_e = np.where(live & (self.R == 1), 1.0 / np.where(nv.e > 0, nv.e, 1.0), 0.0)
        out = {}
        if self.e_fit:
            m = expit(self.Xe @ ge)
            de = m * (1 - m) * ((m > self.e_fit.clip) & (m < 1 - self.e_fit.clip))
            g = pp.base * (-pp.res * r_over_e * ea) * de
            out["gamma_e"] = (pp.F * g[:, None]).T @ self.Xe / n
        if self.mu_fit:
            d1 = -r_over_e * pp.A * ea + pp.aug * e1
            d0 = -r_over_e * (1 - pp.A) * ea - pp.aug
            if self.mu_fit.family == "binomial":
                d1 = d1 * nv.mu1 * (1 - nv.mu1)
                d0 = d0 * nv.mu0 * (1 - nv.mu0)
            out["gamma_mu"] = ((pp.F * (pp.base * d1)[:, None]).T @ self.Xm1
                               + (pp.F * (pp.base * d0)[:, None]).T @ self.Xm0) / n
        return out

    def bread(self, theta, cross: str = "analytic"):
        n = self.panel.n
        beta, ge, gm = self.split(theta)
        L = self.layout
        d = len(theta)
        B = np.zeros((d, d))
        _, pp = self.utilde_ind(theta)
        B[L["beta"], L["beta"]] = _jacobian(pp, beta)
        if cross not in ("analytic", "fd"):
            raise ValueError("cross must be 'analytic' or 'fd'")
        exact = self.cross_analytic(theta) if cross == "analytic" else {}

        def ubar_in(block):
            def f(x):
                th = theta.copy()
                th[L[block]] = x
                return self.utilde_ind(th)[0].mean(axis=0)

            return f

        if self.e_fit:
            B[L["beta"], L["gamma_e"]] = exact["gamma_e"] if cross == "analytic" else _fd_jacobian(ubar_in("gamma_e"), ge)
            m = expit(self.Xe @ ge)
            W = self.mask_e * m * (1 - m)
            B[L["gamma_e"], L["gamma_e"]] = -((self.Xe * W[:, None]).T @ self.Xe + self.Se) / n
        if self.mu_fit:
            B[L["beta"], L["gamma_mu"]] = exact["gamma_mu"] if cross == "analytic" else _fd_jacobian(ubar_in("gamma_mu"), gm)
            if self.mu_fit.family == "gaussian":
                W = self.mask_mu
            else:
                m = expit(self.Xm @ gm)
                W = self.mask_mu * m * (1 - m)
            B[L["gamma_mu"], L["gamma_mu"]] = -((self.Xm * W[:, None]).T @ self.Xm + self.Sm) / n
        return B


def parametric_parts(panel, nuisances: NuisanceSet, beta_hat, model, weights=None, mask=None,
                     cross: str = "analytic") -> SandwichParts:
    st = _Stacked(panel, nuisances, model, weights, mask)
    theta = st.theta_hat(beta_hat)
    Phi = st.phi(theta)
    return SandwichParts(bread=st.bread(theta, cross), meat=Phi.T @ Phi / panel.n, n=panel.n, layout=st.layout)


def sandwich_parametric(panel, nuisances: NuisanceSet, beta_hat, model, weights=None,
                        zero_cross: bool = False, mask=None, cross: str = "analytic") -> np.ndarray:
    """Beta block of the stacked sandwich over (beta, gamma_e, gamma_mu).

    ``cross="fd"`` takes the derivative of U-tilde in the nuisance
    coefficients by central differences (step ``1e-6 * max(1, |gamma_j|)``)
    instead of the chain rule. ``zero_cross`` drops that derivative, which
    reduces the result to the plug-in sandwich.
    """
    parts = parametric_parts(panel, nuisances, beta_hat, model, weights, mask, cross)
    if zero_cross:
        B = parts.bread.copy()
        b = parts.layout["beta"]
        B[b, b.stop:] = 0.0
        parts = SandwichParts(B, parts.meat, parts.n, parts.layout)
    return sandwich(parts, parts.layout["beta"])


def wald_ci(beta_hat, vcov, level: float = 0.95):
    """Normal-theory intervals ``beta_j +/- z * se_j``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    beta = np.asarray(beta_hat, dtype=float)
    d = np.diag(np.atleast_2d(np.asarray(vcov, dtype=float))).copy()
    tol = 1e-14 * max(1.0, float(np.max(np.abs(d))) if d.size else 1.0)
    if np.any(d < -tol) or not np.all(np.isfinite(d)):
        raise NumericalError(f"covariance has negative or non-finite diagonal {d}; sandwich is broken")
    se = np.sqrt(np.clip(d, 0, None))
    z = norm.ppf(1 - (1 - level) / 2)
    return beta - z * se, beta + z * se
