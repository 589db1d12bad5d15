import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from drcee.data import MrtPanel  # noqa: E402
from drcee.estimator import CeeModel, NuisanceValues  # noqa: E402

NAN = float("nan")

# (id, t, avail, treat, prob, obs, y, z)
TOY_ROWS = {
    "two_by_two": [
        (1, 1, 1, 1, 0.4, 1, 2.0, 0.5),
        (1, 2, 1, 0, 0.4, 1, 0.5, -1.0),
        (2, 1, 1, 0, 0.4, 1, 1.0, 0.0),
        (2, 2, 1, 1, 0.4, 1, 3.0, 1.5),
    ],
    "missing_and_unavailable": [
        (1, 1, 1, 1, 0.5, 1, 1.2, 0.3),
        (1, 2, 1, 0, 0.5, 0, NAN, -0.7),
        (1, 3, 0, 0, 0.0, 1, 0.4, 1.1),
        (2, 1, 1, 0, 0.5, 1, -0.3, 1.4),
        (2, 2, 1, 1, 0.5, 1, 2.2, -1.2),
        (2, 3, 1, 1, 0.5, 0, NAN, 0.2),
        (3, 1, 1, 1, 0.5, 0, NAN, -0.4),
        (3, 2, 1, 0, 0.5, 1, 0.8, 0.9),
        (3, 3, 1, 0, 0.5, 1, 0.1, -1.8),
    ],
    "varying_prob": [
        (1, 1, 1, 1, 0.3, 1, 1.5, 0.2),
        (1, 2, 1, 0, 0.7, 1, 0.2, -0.5),
        (2, 1, 1, 0, 0.3, 0, NAN, 1.0),
        (2, 2, 1, 1, 0.5, 1, 2.5, 0.7),
        (3, 1, 1, 1, 0.7, 1, 0.9, -1.3),
        (3, 2, 1, 0, 0.5, 1, -0.6, 0.4),
        (4, 1, 1, 0, 0.5, 1, 0.3, -0.2),
        (4, 2, 1, 1, 0.3, 0, NAN, -0.9),
    ],
    "five_by_three": [
        (1, 1, 1, 1, 0.6, 1, 2.1, 0.1),
        (1, 2, 1, 0, 0.6, 1, 0.7, 1.2),
        (1, 3, 1, 1, 0.6, 0, NAN, -0.3),
        (2, 1, 1, 0, 0.6, 1, -0.2, -1.1),
        (2, 2, 0, 0, 0.0, 0, NAN, 0.6),
        (2, 3, 1, 1, 0.6, 1, 1.9, 0.8),
        (3, 1, 1, 1, 0.6, 1, 1.4, -0.9),
        (3, 2, 1, 1, 0.6, 1, 2.6, 1.7),
        (3, 3, 1, 0, 0.6, 0, NAN, 0.0),
        (4, 1, 1, 0, 0.6, 1, 0.5, 0.4),
        (4, 2, 1, 0, 0.6, 1, 0.9, -1.5),
        (4, 3, 1, 1, 0.6, 1, 1.1, 1.0),
        (5, 1, 1, 0, 0.6, 0, NAN, 1.3),
        (5, 2, 1, 1, 0.6, 1, 3.0, -0.6),
        (5, 3, 1, 0, 0.6, 1, 0.2, 0.5),
    ],
    "positive_outcomes": [
        (1, 1, 1, 1, 0.4, 1, 1.8, 0.2),
        (1, 2, 1, 0, 0.4, 1, 0.9, -0.8),
        (1, 3, 1, 0, 0.4, 0, NAN, 1.4),
        (2, 1, 1, 1, 0.4, 1, 2.4, 0.9),
        (2, 2, 1, 0, 0.4, 1, 1.1, 0.3),
        (2, 3, 1, 1, 0.4, 1, 1.6, -1.1),
        (3, 1, 1, 0, 0.4, 1, 0.7, -0.4),
        (3, 2, 1, 1, 0.4, 0, NAN, 0.5),
        (3, 3, 1, 0, 0.4, 1, 1.3, 1.9),
        (4, 1, 1, 1, 0.4, 1, 2.0, -1.6),
        (4, 2, 1, 0, 0.4, 1, 0.8, 0.1),
        (4, 3, 1, 1, 0.4, 1, 2.9, 0.7),
    ],
}


def panel_from_rows(rows, delta=1, pi=None):
    cols = list(zip(*rows))
    return MrtPanel.from_arrays(
        ids=cols[0], t=cols[1], avail=cols[2], treat=cols[3], prob_treat=cols[4], obs_flag=cols[5],
        outcome=cols[6], covariates={"z": cols[7]}, delta=delta,
        pi_prob=None if pi is None else [pi if r[2] else 0.0 for r in rows],
    )


def toy_nuisances(panel, pt=0.45):
    """Smooth closed-form nuisances of z and the treatment arm."""
    z = panel.covariate("z")
    e = 1 / (1 + np.exp(-(0.3 + 0.5 * z)))
    return NuisanceValues(e=e, mu1=0.9 + 0.4 * z, mu0=0.2 + 0.3 * z, ptilde=np.full(panel.N, pt))


def oracle_records(panel, nv, model, wd=None):
    """Translate a panel plus evaluated nuisances into the loop oracle's format."""
    F = []
    for i in range(panel.N):
        row = []
        for f in model.f_spec:
            row.append(1.0 if f == "1" else float(panel.t[i]) if f == "t" else float(panel.covariate(f)[i]))
        F.append(row)
    inds = []
    for i in range(panel.N):
        if panel.t[i] == 1:
            inds.append([])
        y = float(panel.outcome[i])
        inds[-1].append(dict(
            I=int(panel.avail[i]), a=int(panel.treat[i]), p=float(panel.prob_treat[i]), R=int(panel.obs_flag[i]),
            y=0.0 if math.isnan(y) else y, e=float(nv.e[i]), mu1=float(nv.mu1[i]), mu0=float(nv.mu0[i]),
            pt=float(nv.ptilde[i]), f=F[i], wd=1.0 if wd is None else float(wd[i]),
        ))
    return inds


@pytest.fixture(params=sorted(TOY_ROWS))
def toy(request):
    panel = panel_from_rows(TOY_ROWS[request.param])
    return request.param, panel


@pytest.fixture
def model_1z():
    return CeeModel(f_spec=("1", "z"))


def random_panel(rng, n, T, missing=True, unavailable=True, p_lo=0.2, p_hi=0.8, positive=False):
    """Random well-formed panel with covariate z."""
    N = n * T
    avail = (rng.random(N) < 0.85).astype(int) if unavailable else np.ones(N, dtype=int)
    p = np.where(avail == 1, rng.uniform(p_lo, p_hi, N), 0.0)
    a = np.where(avail == 1, rng.random(N) < p, 0).astype(int)
    z = rng.normal(size=N)
    r = (rng.random(N) < 0.75).astype(int) if missing else np.ones(N, dtype=int)
    y = (np.exp(0.3 * z + 0.2 * a) * rng.gamma(2.0, 0.5, N)) if positive else 1 + a * (0.5 + z) + rng.normal(size=N)
    return MrtPanel.from_arrays(
        ids=np.repeat(np.arange(n), T), t=np.tile(np.arange(1, T + 1), n), avail=avail, treat=a, prob_treat=p,
        obs_flag=r, outcome=np.where(r == 1, y, np.nan), covariates={"z": z},
    )


# one line per acceptance criterion, echoed after the test session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
