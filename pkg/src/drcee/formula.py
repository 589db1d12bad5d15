"""Formula mini-language and design matrices for nuisance models.

Variables are looked up by name in a mapping of column arrays. Two names are
reserved: ``t`` (decision point index) and ``a`` (treatment). ``a * (x + s(z))``
expands to the treatment main effect plus treatment interactions with each
term; main effects of ``x`` and ``s(z)`` must be listed separately, e.g.::

    y ~ a*(s(z,10) + s(t,10)) + s(z,10) + s(t,10)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .splines import PSplineBasis

TREAT = "a"
FAMILIES = ("gaussian", "binomial")


@dataclass(frozen=True)
class Intercept:
    def label(self):
        return "1"


@dataclass(frozen=True)
class Linear:
    var: str

    def label(self):
        return self.var


@dataclass(frozen=True)
class Spline:
    var: str
    num_basis: int = 10
    penalty_order: int = 2

    def label(self):
        return f"s({self.var},{self.num_basis},{self.penalty_order})"


@dataclass(frozen=True)
class TreatMain:
    def label(self):
        return TREAT


@dataclass(frozen=True)
class TreatInteract:
    term: Union[Linear, Spline]

    def label(self):
        return f"{TREAT}:{self.term.label()}"


Term = Union[Intercept, Linear, Spline, TreatMain, TreatInteract]


@dataclass(frozen=True)
class FormulaSpec:
    terms: tuple
    family: str = "gaussian"
    response: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if len(set(self.terms)) != len(self.terms):
            raise ConfigError("duplicate terms in formula")
        for kind in (lambda tm: tm, lambda tm: tm.term if isinstance(tm, TreatInteract) else None):
            seen = [kind(tm).var for tm in self.terms if isinstance(kind(tm), Spline)]
            if len(seen) != len(set(seen)):
                raise ConfigError("at most one spline term per variable")
        for tm in self.terms:
            if isinstance(tm, Spline) and tm.num_basis < tm.penalty_order + 2:
                raise ConfigError(f"{tm.label()}: num_basis must be >= penalty_order + 2")
            if isinstance(tm, (Linear, Spline)) and tm.var == TREAT:
                raise ConfigError("use 'a' only as treatment main effect or interaction")
            if isinstance(tm, TreatInteract):
                if not isinstance(tm.term, (Linear, Spline)):
                    raise ConfigError(f"cannot interact treatment with {tm.term!r}")

    @property
    def variables(self) -> set[str]:
        out = set()
        for tm in self.terms:
            inner = tm.term if isinstance(tm, TreatInteract) else tm
            if isinstance(inner, (Linear, Spline)):
                out.add(inner.var)
            if isinstance(tm, (TreatMain, TreatInteract)):
                out.add(TREAT)
        return out

    @property
    def uses_treatment(self) -> bool:
        return any(isinstance(tm, (TreatMain, TreatInteract)) for tm in self.terms)

    @property
    def has_splines(self) -> bool:
        return any(isinstance(tm, Spline) or (isinstance(tm, TreatInteract) and isinstance(tm.term, Spline))
                   for tm in self.terms)

    def to_text(self) -> str:
        lhs = f"{self.response} ~ " if self.response else "~ "
        labels = [tm.label() for tm in self.terms if not isinstance(tm, Intercept)]
        if not any(isinstance(tm, Intercept) for tm in self.terms):
            labels.insert(0, "0")
        return lhs + (" + ".join(labels) if labels else "1")


# --- parser -------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d*)?)|([A-Za-z_][A-Za-z0-9_.]*)|(\S))")


def _tokenize(text):
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            break
        num, name, sym = m.groups()
        out.append(("num", num) if num else ("name", name) if name else ("sym", sym))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0
        self.text = text

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise ConfigError(f"formula {self.text!r}: unexpected token {tok[1]!r}")
        self.i += 1
        return tok

    def sum(self):
        # returns list of (sign, term) where term may be "1" / "0" markers
        items = [(+1, t) for t in self.product()]
        while self.peek() in (("sym", "+"), ("sym", "-")):
            sign = +1 if self.take()[1] == "+" else -1
            items += [(sign, t) for t in self.product()]
        return items

    def product(self):
        left = self.factor()
        op = self.peek()
        if op in (("sym", "*"), ("sym", ":")):
            self.take()
            right = self.factor()
            return self._interact(left, right, main=op[1] == "*")
        return left

    def _interact(self, left, right, main):
        if left == [TreatMain()]:
            other = right
        elif right == [TreatMain()]:
            other = left
        else:
            raise ConfigError(f"formula {self.text!r}: only interactions with the treatment 'a' are supported")
        out = [TreatMain()] if main else []
        for tm in other:
            if isinstance(tm, (Linear, Spline)):
                out.append(TreatInteract(tm))
            elif tm not in ("1", Intercept()):
                raise ConfigError(f"formula {self.text!r}: cannot interact 'a' with {tm!r}")
        return out

    def factor(self):
        kind, val = self.peek()
        if (kind, val) == ("sym", "("):
            self.take()
            items = self.sum()
            self.take("sym", ")")
            if any(s < 0 for s, _ in items):
                raise ConfigError(f"formula {self.text!r}: '-' not allowed inside parentheses")
            return [t for _, t in items]
        if kind == "num":
            self.take()
            if val in ("0", "1"):
                return [val]
            raise ConfigError(f"formula {self.text!r}: bare number {val}")
        if kind == "name":
            self.take()
            if val == "s" and self.peek() == ("sym", "("):
                return [self._spline()]
            return [TreatMain()] if val == TREAT else [Linear(val)]
        raise ConfigError(f"formula {self.text!r}: unexpected token {val!r}")

    def _spline(self):
        self.take("sym", "(")
        var = self.take("name")[1]
        args = []
        while self.peek() == ("sym", ","):
            self.take()
            args.append(int(self.take("num")[1]))
        self.take("sym", ")")
        if len(args) > 2:
            raise ConfigError(f"formula {self.text!r}: s() takes at most (var, num_basis, penalty_order)")
        return Spline(var, *args)


def parse_formula(text: str, family: str = "gaussian") -> FormulaSpec:
    """Parse ``"y ~ a*(s(z) + t) + s(z) + t"`` into a :class:`FormulaSpec`."""
    response = None
    if "~" in text:
        lhs, rhs = text.split("~", 1)
        response = lhs.strip() or None
    else:
        rhs = text
    p = _Parser(rhs)
    items = p.sum() if rhs.strip() else [(+1, "1")]
    if p.i != len(p.toks):
        raise ConfigError(f"formula {text!r}: trailing input")
    intercept = True
    terms = []
    for sign, tm in items:
        if tm == "1":
            intercept = sign > 0
        elif tm == "0":
            intercept = False
        elif sign < 0:
            terms = [x for x in terms if x != tm]
        elif tm not in terms:
            terms.append(tm)
    if intercept:
        terms.insert(0, Intercept())
    return FormulaSpec(tuple(terms), family=family, response=response)


def term_from_dict(d) -> Term:
    kind = d["kind"]
    if kind == "intercept":
        return Intercept()
    if kind == "treat_main":
        return TreatMain()
    if kind == "linear":
        return Linear(d["var"])
    if kind == "spline":
        return Spline(d["var"], int(d.get("num_basis", 10)), int(d.get("penalty_order", 2)))
    if kind == "treat_interact":
        return TreatInteract(term_from_dict(d["term"]))
    raise ConfigError(f"unknown term kind {kind!r}")


def term_to_dict(tm) -> dict:
    if isinstance(tm, Intercept):
        return {"kind": "intercept"}
    if isinstance(tm, TreatMain):
        return {"kind": "treat_main"}
    if isinstance(tm, Linear):
        return {"kind": "linear", "var": tm.var}
    if isinstance(tm, Spline):
        return {"kind": "spline", "var": tm.var, "num_basis": tm.num_basis, "penalty_order": tm.penalty_order}
    return {"kind": "treat_interact", "term": term_to_dict(tm.term)}


# --- design matrices ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TermBlock:
    term: Term
    start: int
    stop: int
    basis: PSplineBasis | None = None
    constraint: np.ndarray | None = None  # k x (k-1) sum-to-zero reparameterization

    @property
    def columns(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def is_penalized(self) -> bool:
        return self.basis is not None

    def penalty_root(self) -> np.ndarray:
        return self.basis.difference_matrix() @ self.constraint


@dataclass(frozen=True, eq=False)
class DesignInfo:
    """Everything needed to rebuild the design on new rows."""

    spec: FormulaSpec
    blocks: tuple
    column_names: tuple

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    @property
    def penalized_blocks(self) -> list:
        return [b for b in self.blocks if b.is_penalized]

    def transform(self, variables: Mapping[str, np.ndarray], arm: int | None = None) -> np.ndarray:
        """Design matrix for ``variables``; ``arm`` overrides the treatment column."""
        n = _n_rows(variables)
        X = np.empty((n, self.n_columns))
        for b in self.blocks:
            X[:, b.columns] = _term_columns(b.term, variables, n, arm, b)
        return X

    def penalty_root(self, lams) -> np.ndarray:
        """Stack of sqrt(lambda_j) * D_j placed at each smooth's columns."""
        rows = []
        for b, lam in zip(self.penalized_blocks, lams):
            R = b.penalty_root()
            E = np.zeros((R.shape[0], self.n_columns))
            E[:, b.columns] = np.sqrt(lam) * R
            rows.append(E)
        return np.vstack(rows) if rows else np.zeros((0, self.n_columns))

    def penalty(self, lams) -> np.ndarray:
        E = self.penalty_root(lams)
        return E.T @ E

    def to_dict(self) -> dict:
        return {
            "family": self.spec.family,
            "response": self.spec.response,
            "formula": self.spec.to_text(),
            "column_names": list(self.column_names),
            "blocks": [
                {
                    "term": term_to_dict(b.term),
                    "start": b.start,
                    "stop": b.stop,
                    "basis": None if b.basis is None else b.basis.to_dict(),
                    "constraint": None if b.constraint is None else b.constraint.tolist(),
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignInfo":
        blocks = tuple(
            TermBlock(
                term=term_from_dict(b["term"]),
                start=b["start"],
                stop=b["stop"],
                basis=None if b["basis"] is None else PSplineBasis.from_dict(b["basis"]),
                constraint=None if b["constraint"] is None else np.asarray(b["constraint"], dtype=float),
            )
            for b in d["blocks"]
        )
        spec = FormulaSpec(tuple(b.term for b in blocks), family=d["family"], response=d.get("response"))
        return cls(spec=spec, blocks=blocks, column_names=tuple(d["column_names"]))


@dataclass(frozen=True, eq=False)
class Design:
    matrix: np.ndarray
    info: DesignInfo | None = None
    column_names: tuple = field(default=())

    def __post_init__(self):
        if not self.column_names:
            names = self.info.column_names if self.info else tuple(f"x{j}" for j in range(self.matrix.shape[1]))
            object.__setattr__(self, "column_names", names)


def _n_rows(variables) -> int:
    for v in variables.values():
        return len(v)
    raise SchemaError("no variables supplied")


def _var(variables, name, n):
    if name not in variables:
        raise SchemaError(f"unknown variable {name!r}; available: {sorted(variables)}")
    col = np.asarray(variables[name], dtype=float)
    if col.shape != (n,):
        raise SchemaError(f"variable {name!r} has shape {col.shape}, expected ({n},)")
    return col


def _treat(variables, n, arm):
    if arm is not None:
        if arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        return np.full(n, float(arm))
    return _var(variables, TREAT, n)


def _term_columns(term, variables, n, arm, block):
    if isinstance(term, Intercept):
        return np.ones((n, 1))
    if isinstance(term, TreatMain):
        return _treat(variables, n, arm)[:, None]
    if isinstance(term, Linear):
        return _var(variables, term.var, n)[:, None]
    if isinstance(term, Spline):
        return block.basis.evaluate(_var(variables, term.var, n)) @ block.constraint
    inner = _term_columns(term.term, variables, n, arm, block)
    return _treat(variables, n, arm)[:, None] * inner


def _sum_to_zero(colsums):
    """Orthonormal basis for {g : colsums . g = 0}."""
    k = len(colsums)
    Q, _ = np.linalg.qr(colsums.reshape(k, 1), mode="complete")
    return Q[:, 1:]


def _names(term, width):
    if width == 1:
        return [term.label() if not isinstance(term, Intercept) else "(Intercept)"]
    return [f"{term.label()}[{j + 1}]" for j in range(width)]


def build_design(variables: Mapping[str, np.ndarray], spec: FormulaSpec) -> Design:
    """Evaluate ``spec`` on the given rows, fixing knots and constraints from them."""
    n = _n_rows(variables)
    cols, blocks, names = [], [], []
    bases = {}
    start = 0
    for term in spec.terms:
        inner = term.term if isinstance(term, TreatInteract) else term
        basis = constraint = None
        if isinstance(inner, Spline):
            if inner.var not in bases:
                x = _var(variables, inner.var, n)
                if len(np.unique(x)) < inner.num_basis:
                    raise DataError(
                        f"spline variable {inner.var!r} has {len(np.unique(x))} distinct values, "
                        f"fewer than num_basis={inner.num_basis}"
                    )
                bases[inner.var] = PSplineBasis.from_range(
                    float(x.min()), float(x.max()), inner.num_basis, 3, inner.penalty_order
                )
            basis = bases[inner.var]
            raw = basis.evaluate(_var(variables, inner.var, n))
            if isinstance(term, TreatInteract):
                raw = _treat(variables, n, None)[:, None] * raw
            constraint = _sum_to_zero(raw.sum(axis=0))
            block_cols = raw @ constraint
        else:
            block_cols = _term_columns(term, variables, n, None, None)
        width = block_cols.shape[1]
        blocks.append(TermBlock(term, start, start + width, basis, constraint))
        names += _names(term, width)
        cols.append(block_cols)
        start += width
    X = np.hstack(cols) if cols else np.zeros((n, 0))
    info = DesignInfo(spec=spec, blocks=tuple(blocks), column_names=tuple(names))
    return Design(matrix=X, info=info)
