"""Cubic B-spline bases with difference penalties (P-splines)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True, eq=False)
class PSplineBasis:
    """B-spline basis on equally spaced knots padded past the data range.

    Evaluation points are clamped to ``[lower, upper]`` so that predictions
    outside the fitted range extrapolate as constants.
    """

    knots: np.ndarray
    degree: int = 3
    penalty_order: int = 2

    @classmethod
    def from_range(cls, lo: float, hi: float, num_basis: int = 10, degree: int = 3, penalty_order: int = 2):
        if not hi > lo:
            raise ValueError(f"degenerate spline range [{lo}, {hi}]")
        if num_basis < penalty_order + 2 or num_basis < degree + 1:
            raise ValueError(f"num_basis={num_basis} too small for degree {degree} and penalty order {penalty_order}")
        n_int = num_basis - degree
        h = (hi - lo) / n_int
        knots = lo + h * np.arange(-degree, n_int + degree + 1)
        # pin the ends exactly so clamped points evaluate inside the base interval
        knots[degree] = lo
        knots[degree + n_int] = hi
        return cls(knots=knots, degree=degree, penalty_order=penalty_order)

    @property
    def num_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def lower(self) -> float:
        return float(self.knots[self.degree])

    @property
    def upper(self) -> float:
        return float(self.knots[-self.degree - 1])

    def evaluate(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), self.lower, self.upper)
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()

    def difference_matrix(self) -> np.ndarray:
        return np.diff(np.eye(self.num_basis), n=self.penalty_order, axis=0)

    @property
    def penalty(self) -> np.ndarray:
        D = self.difference_matrix()
        return D.T @ D

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "degree": self.degree, "penalty_order": self.penalty_order}

    @classmethod
    def from_dict(cls, d: dict) -> "PSplineBasis":
        return cls(knots=np.asarray(d["knots"], dtype=float), degree=int(d["degree"]), penalty_order=int(d["penalty_order"]))
