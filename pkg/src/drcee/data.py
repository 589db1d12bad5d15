"""Long-format MRT panel: one row per (individual, decision point)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConsistencyError, DataValueError, SchemaError, StructureError

ROLES = ("id", "t", "avail", "treat", "prob_treat", "obs_flag", "outcome")
OPTIONAL_ROLES = ("pi_prob",)
RESERVED_NAMES = ("t", "a")
DEFAULT_MARGIN = 0.01


@dataclass(frozen=True)
class DecisionRecord:
    individual_id: object
    t: int
    avail: int
    treat: int
    prob_treat: float
    obs_flag: int
    outcome: float | None
    covariates: Mapping[str, float]
    pi_prob: float | None = None


def _frozen(arr, dtype=None):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def _id_sort_key(ids):
    try:
        return np.array([int(v) for v in ids], dtype=np.int64)
    except (TypeError, ValueError):
        return np.array([str(v) for v in ids], dtype=object)


@dataclass(frozen=True, eq=False)
class MrtPanel:
    """Validated, immutable panel stored column-wise.

    Rows are sorted by ``(individual_id, t)`` so that row ``i * T + (t - 1)``
    belongs to the ``i``-th individual. Missing outcomes are ``nan`` in
    ``outcome`` and ``obs_flag`` is the authoritative missingness indicator.
    """

    ids: np.ndarray
    t: np.ndarray
    avail: np.ndarray
    treat: np.ndarray
    prob_treat: np.ndarray
    obs_flag: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    pi_prob: np.ndarray | None = None
    delta: int = 1
    n: int = field(init=False)
    T: int = field(init=False)

    def __post_init__(self):
        N = len(self.t)
        for name in ("ids", "avail", "treat", "prob_treat", "obs_flag", "outcome"):
            if len(getattr(self, name)) != N:
                raise StructureError(f"column {name!r} has length {len(getattr(self, name))}, expected {N}")
        if self.covariates.shape != (N, len(self.covariate_names)):
            raise StructureError("covariate matrix does not match covariate_names")
        for name in self.covariate_names:
            if name in RESERVED_NAMES:
                raise SchemaError(f"covariate name {name!r} is reserved")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise SchemaError("duplicate covariate names")
        if int(self.delta) < 1:
            raise StructureError(f"window length delta must be >= 1, got {self.delta}")
        _check_values(self)
        n, T = _check_grouping(self.ids, self.t)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "T", T)

    @classmethod
    def from_arrays(
        cls,
        ids,
        t,
        avail,
        treat,
        prob_treat,
        obs_flag,
        outcome,
        covariates: Mapping[str, Sequence[float]] | None = None,
        pi_prob=None,
        delta: int = 1,
    ) -> "MrtPanel":
        """Build a panel from unsorted columns; rows are sorted by (id, t)."""
        ids = np.asarray(ids, dtype=object)
        t = np.asarray(t)
        covariates = dict(covariates or {})
        order = np.lexsort((t, _id_sort_key(ids)))
        names = tuple(covariates)
        if names:
            cov = np.column_stack([np.asarray(covariates[k], dtype=float) for k in names])
        else:
            cov = np.zeros((len(t), 0))
        outcome = np.asarray(outcome, dtype=float)
        obs_flag = np.asarray(obs_flag)
        return cls(
            ids=_frozen(ids[order], object),
            t=_frozen(t[order], np.int64),
            avail=_frozen(np.asarray(avail)[order], np.int8),
            treat=_frozen(np.asarray(treat)[order], np.int8),
            prob_treat=_frozen(np.asarray(prob_treat, dtype=float)[order]),
            obs_flag=_frozen(obs_flag[order], np.int8),
            outcome=_frozen(np.where(obs_flag == 1, outcome, np.nan)[order]),
            covariates=_frozen(cov[order]),
            covariate_names=names,
            pi_prob=None if pi_prob is None else _frozen(np.asarray(pi_prob, dtype=float)[order]),
            delta=int(delta),
        )

    @property
    def N(self) -> int:
        return len(self.t)

    @property
    def unit(self) -> np.ndarray:
        """Individual index 0..n-1 for every row."""
        return np.repeat(np.arange(self.n), self.T)

    @property
    def individual_ids(self) -> list:
        return list(self.ids[:: self.T])

    def covariate(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None

    def variables(self) -> dict[str, np.ndarray]:
        """Name -> column mapping used by formulas (``t``, ``a`` and covariates)."""
        out = {"t": self.t.astype(float), "a": self.treat.astype(float)}
        for j, name in enumerate(self.covariate_names):
            out[name] = self.covariates[:, j]
        return out

    def records(self) -> Iterator[DecisionRecord]:
        for i in range(self.N):
            yield DecisionRecord(
                individual_id=self.ids[i],
                t=int(self.t[i]),
                avail=int(self.avail[i]),
                treat=int(self.treat[i]),
                prob_treat=float(self.prob_treat[i]),
                obs_flag=int(self.obs_flag[i]),
                outcome=float(self.outcome[i]) if self.obs_flag[i] else None,
                covariates=dict(zip(self.covariate_names, map(float, self.covariates[i]))),
                pi_prob=None if self.pi_prob is None else float(self.pi_prob[i]),
            )

    def _columns(self) -> dict:
        return dict(
            ids=self.ids,
            t=self.t,
            avail=self.avail,
            treat=self.treat,
            prob_treat=self.prob_treat,
            obs_flag=self.obs_flag,
            outcome=self.outcome,
            covariates=dict(zip(self.covariate_names, self.covariates.T)),
            pi_prob=self.pi_prob,
            delta=self.delta,
        )

    def with_outcomes(self, outcome, obs_flag) -> "MrtPanel":
        cols = self._columns()
        cols.update(outcome=outcome, obs_flag=obs_flag)
        return MrtPanel.from_arrays(**cols)

    def select(self, individual_ids) -> "MrtPanel":
        keep = np.isin(self.ids, np.asarray(list(individual_ids), dtype=object))
        cols = self._columns()
        for key in ("ids", "t", "avail", "treat", "prob_treat", "obs_flag", "outcome"):
            cols[key] = cols[key][keep]
        cols["covariates"] = {k: v[keep] for k, v in cols["covariates"].items()}
        if cols["pi_prob"] is not None:
            cols["pi_prob"] = cols["pi_prob"][keep]
        return MrtPanel.from_arrays(**cols)


def concat_panels(panels: Sequence[MrtPanel]) -> MrtPanel:
    """Stack panels, relabelling individuals as ``"<k>:<id>"``."""
    first = panels[0]
    cols = {k: [] for k in ("ids", "t", "avail", "treat", "prob_treat", "obs_flag", "outcome")}
    cov = {name: [] for name in first.covariate_names}
    pis = []
    for k, p in enumerate(panels):
        if p.covariate_names != first.covariate_names or p.delta != first.delta:
            raise StructureError("panels differ in covariates or delta")
        cols["ids"].append(np.array([f"{k}:{v}" for v in p.ids], dtype=object))
        for key in ("t", "avail", "treat", "prob_treat", "obs_flag", "outcome"):
            cols[key].append(getattr(p, key))
        for name in first.covariate_names:
            cov[name].append(p.covariate(name))
        if p.pi_prob is not None:
            pis.append(p.pi_prob)
    merged = {k: np.concatenate(v) for k, v in cols.items()}
    return MrtPanel.from_arrays(
        **merged,
        covariates={k: np.concatenate(v) for k, v in cov.items()},
        pi_prob=np.concatenate(pis) if len(pis) == len(panels) else None,
        delta=first.delta,
    )


def _check_values(p: MrtPanel):
    for name in ("avail", "treat", "obs_flag"):
        col = getattr(p, name)
        bad = np.flatnonzero((col != 0) & (col != 1))
        if bad.size:
            raise DataValueError(f"{name} must be 0/1; row {bad[0]} has {col[bad[0]]}")
    prob = p.prob_treat
    bad = np.flatnonzero(~np.isfinite(prob) | (prob < 0) | (prob > 1))
    if bad.size:
        raise DataValueError(f"prob_treat must lie in [0, 1]; row {bad[0]} has {prob[bad[0]]}")
    off = p.avail == 0
    bad = np.flatnonzero(off & ((p.treat != 0) | (prob != 0)))
    if bad.size:
        raise StructureError(
            f"row {bad[0]}: unavailable decision point (avail=0) must have treat=0 and "
            f"prob_treat=0 (treatment is deterministic when unavailable)"
        )
    obs = p.obs_flag == 1
    bad = np.flatnonzero(obs & ~np.isfinite(p.outcome))
    if bad.size:
        raise ConsistencyError(f"row {bad[0]}: obs_flag=1 but outcome is absent or non-finite")
    if not np.all(np.isfinite(p.covariates)):
        r = np.argwhere(~np.isfinite(p.covariates))[0]
        raise DataValueError(f"row {r[0]}: covariate {p.covariate_names[r[1]]!r} is not finite")
    if p.pi_prob is not None:
        pi = p.pi_prob
        bad = np.flatnonzero(~np.isfinite(pi) | (pi < 0) | (pi > 1))
        if bad.size:
            raise DataValueError(f"pi_prob must lie in [0, 1]; row {bad[0]} has {pi[bad[0]]}")
        bad = np.flatnonzero(off & (pi != 0))
        if bad.size:
            raise StructureError(f"row {bad[0]}: pi_prob must be 0 when avail=0")


def _check_grouping(ids, t) -> tuple[int, int]:
    if len(t) == 0:
        raise StructureError("panel is empty")
    uniq, start, counts = np.unique(_id_sort_key(ids), return_index=True, return_counts=True)
    n = len(uniq)
    if n < 2:
        raise StructureError(f"need at least 2 individuals, got {n}")
    T = int(counts.max())
    ragged = [ids[start[i]] for i in range(n) if counts[i] != T]
    if ragged:
        raise StructureError(f"ragged panel: individuals {ragged} do not have T={T} records")
    if not all(a == b for a, b in zip(ids, np.repeat(ids[::T], T))):
        raise StructureError("rows are not grouped by individual; build panels with MrtPanel.from_arrays")
    expected = np.tile(np.arange(1, T + 1), n)
    if not np.array_equal(np.asarray(t), expected):
        bad = sorted({ids[i] for i in np.flatnonzero(np.asarray(t) != expected)}, key=str)
        raise StructureError(f"individuals {bad} do not have decision points t=1..{T} without gaps or duplicates")
    return n, T


# --- CSV ---------------------------------------------------------------------


def _parse_binary(cell, role, line):
    if cell.strip() in ("0", "1"):
        return int(cell)
    try:
        v = float(cell)
    except ValueError:
        raise DataValueError(f"line {line}: {role} must be 0/1, got {cell!r}") from None
    if v not in (0.0, 1.0):
        raise DataValueError(f"line {line}: {role} must be 0/1, got {cell!r}")
    return int(v)


def _parse_float(cell, role, line):
    try:
        return float(cell)
    except ValueError:
        raise DataValueError(f"line {line}: {role} is not numeric: {cell!r}") from None


def _is_numeric_column(rows, idx):
    for row in rows:
        cell = row[idx].strip()
        if cell == "":
            return False
        try:
            float(cell)
        except ValueError:
            return False
    return True


def load_csv(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    delta: int = 1,
    covariates: Sequence[str] | None = None,
) -> MrtPanel:
    """Read a long-format CSV into a validated :class:`MrtPanel`.

    Parameters
    ----------
    path : str or Path
        UTF-8 CSV with a header row.
    schema : mapping, optional
        Role -> column name. Roles not given default to the role name itself.
    delta : int
        Outcome window length.
    covariates : sequence of str, optional
        Explicit covariate columns. By default every numeric column not bound
        to a role is a covariate.
    """
    schema = {**{r: r for r in ROLES + OPTIONAL_ROLES}, **dict(schema or {})}
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    pos = {name: j for j, name in enumerate(header)}
    for role in ROLES:
        if schema[role] not in pos:
            raise SchemaError(f"missing column {schema[role]!r} for required role {role!r}")
    for k, row in enumerate(rows):
        if len(row) != len(header):
            raise StructureError(f"line {k + 2}: expected {len(header)} cells, got {len(row)}")
    has_pi = schema["pi_prob"] in pos
    bound = {schema[r] for r in ROLES} | ({schema["pi_prob"]} if has_pi else set())
    if covariates is None:
        covariates = [h for h in header if h not in bound and _is_numeric_column(rows, pos[h])]
    else:
        missing = [c for c in covariates if c not in pos]
        if missing:
            raise SchemaError(f"covariate columns not found: {missing}")

    ids, t, avail, treat, prob, obs, y, pi = [], [], [], [], [], [], [], []
    cov = {c: [] for c in covariates}
    for k, row in enumerate(rows):
        line = k + 2
        cell = lambda role: row[pos[schema[role]]].strip()  # noqa: E731
        ids.append(cell("id"))
        try:
            t.append(int(cell("t")))
        except ValueError:
            raise DataValueError(f"line {line}: t must be an integer, got {cell('t')!r}") from None
        avail.append(_parse_binary(cell("avail"), "avail", line))
        treat.append(_parse_binary(cell("treat"), "treat", line))
        obs.append(_parse_binary(cell("obs_flag"), "obs_flag", line))
        prob.append(_parse_float(cell("prob_treat"), "prob_treat", line))
        raw = cell("outcome")
        if obs[-1] == 0 and raw != "":
            raise ConsistencyError(f"line {line}: obs_flag=0 but outcome is {raw!r}")
        if obs[-1] == 1:
            if raw == "":
                raise ConsistencyError(f"line {line}: obs_flag=1 but outcome is empty")
            v = _parse_float(raw, "outcome", line)
            if not math.isfinite(v):
                raise ConsistencyError(f"line {line}: outcome is not finite")
            y.append(v)
        else:
            y.append(math.nan)
        if avail[-1] == 0 and treat[-1] == 1:
            raise StructureError(f"line {line}: avail=0 with treat=1 (treatment must be 0 when unavailable)")
        if has_pi:
            pi.append(_parse_float(cell("pi_prob"), "pi_prob", line))
        for c in covariates:
            cov[c].append(_parse_float(row[pos[c]].strip(), c, line))
    return MrtPanel.from_arrays(
        ids, t, avail, treat, prob, obs, y,
        covariates=cov, pi_prob=pi if has_pi else None, delta=delta,
    )


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def write_csv(panel: MrtPanel, path: str | Path, schema: Mapping[str, str] | None = None) -> None:
    schema = {**{r: r for r in ROLES + OPTIONAL_ROLES}, **dict(schema or {})}
    header = [schema[r] for r in ROLES]
    if panel.pi_prob is not None:
        header.append(schema["pi_prob"])
    header += list(panel.covariate_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(panel.N):
            row = [
                str(panel.ids[i]),
                str(int(panel.t[i])),
                str(int(panel.avail[i])),
                str(int(panel.treat[i])),
                _fmt(panel.prob_treat[i]),
                str(int(panel.obs_flag[i])),
                _fmt(panel.outcome[i]) if panel.obs_flag[i] else "",
            ]
            if panel.pi_prob is not None:
                row.append(_fmt(panel.pi_prob[i]))
            row += [_fmt(v) for v in panel.covariates[i]]
            w.writerow(row)


# --- positivity ---------------------------------------------------------------


@dataclass(frozen=True)
class PositivityReport:
    margin: float
    violations: tuple[tuple[object, int, float], ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)


def validate_positivity(panel: MrtPanel, margin: float = DEFAULT_MARGIN) -> PositivityReport:
    """List available decision points whose randomization probability is outside [c, 1-c]."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    p = panel.prob_treat
    bad = np.flatnonzero((panel.avail == 1) & ((p < margin) | (p > 1 - margin)))
    return PositivityReport(
        margin=margin,
        violations=tuple((panel.ids[i], int(panel.t[i]), float(p[i])) for i in bad),
    )
