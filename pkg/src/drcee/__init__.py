"""Doubly robust estimation of causal excursion effects in micro-randomized
trials with outcomes missing at random."""

__version__ = "0.1.0"

from .data import MrtPanel, load_csv, validate_positivity, write_csv
from .errors import CeeError, ConfigError, DataError, NumericalError
from .estimator import CeeEstimate, CeeModel, NuisanceSet, Stage1Config, estimate_cee, fit_stage1
from .formula import parse_formula
from .nuisance import fit_formula, fit_glm, fit_pspline_gam
from .variance import sandwich_nonparametric, sandwich_parametric, wald_ci

__all__ = [
    "CeeError", "CeeEstimate", "CeeModel", "ConfigError", "DataError", "MrtPanel", "NumericalError",
    "NuisanceSet", "Stage1Config", "estimate_cee", "fit_formula", "fit_glm", "fit_pspline_gam", "fit_stage1",
    "load_csv", "parse_formula", "sandwich_nonparametric", "sandwich_parametric", "validate_positivity",
    "wald_ci", "write_csv",
]
