"""Problem models: CNF formulas, polynomial costs, factor graphs and energies.

Variables are indexed from 0 internally.  Assignments are binary vectors
``x`` in {0,1}^N; the spin view is ``sigma = 2 x - 1``.

Both model types compile to the same weighted-clause table (see
:mod:`rlnmc._kernels`), which backs the incremental flip bookkeeping used by
every sampler in the package.  A CNF clause is unsat iff all its literals are
false, and a binary monomial ``c * x_i * x_j ...`` is a clause of negated
literals with weight ``c``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Literal, Sequence, Union

import numpy as np

from . import _kernels

Domain = Literal["binary", "spin"]


class DimensionError(ValueError):
    """Assignment length does not match the model."""


class ConsistencyError(RuntimeError):
    """An incremental cache disagrees with a fresh recomputation."""


class DimacsError(ValueError):
    """Malformed DIMACS or polynomial text, with the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# CNF
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Clause:
    """A disjunction of literals; ``negated[t]`` applies to ``variables[t]``."""

    variables: tuple[int, ...]
    negated: tuple[bool, ...]

    def __post_init__(self):
        if len(self.variables) == 0:
            raise ValueError("clause width must be >= 1")
        if len(self.variables) != len(self.negated):
            raise ValueError("variables and negation flags differ in length")
        if len(set(self.variables)) != len(self.variables):
            raise ValueError(f"repeated variable in clause {self.variables}")
        object.__setattr__(self, "variables", tuple(int(v) for v in self.variables))
        object.__setattr__(self, "negated", tuple(bool(n) for n in self.negated))

    @classmethod
    def from_dimacs(cls, lits: Iterable[int]) -> "Clause":
        lits = list(lits)
        return cls(tuple(abs(l) - 1 for l in lits), tuple(l < 0 for l in lits))

    def to_dimacs(self) -> list[int]:
        return [-(v + 1) if n else v + 1 for v, n in zip(self.variables, self.negated)]

    @property
    def width(self) -> int:
        return len(self.variables)

    @property
    def key(self) -> frozenset:
        """Unordered literal-set identity used for duplicate detection."""
        return frozenset(zip(self.variables, self.negated))

    def is_satisfied(self, x: np.ndarray) -> bool:
        return any(bool(x[v]) != n for v, n in zip(self.variables, self.negated))


@dataclass(frozen=True)
class CnfFormula:
    num_vars: int
    clauses: tuple[Clause, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(self.clauses))
        if self.num_vars < 0:
            raise ValueError("num_vars must be non-negative")
        seen = set()
        for c in self.clauses:
            if max(c.variables) >= self.num_vars:
                raise ValueError(f"clause {c.to_dimacs()} references a variable >= N={self.num_vars}")
            if c.key in seen:
                raise ValueError(f"duplicate clause {c.to_dimacs()}")
            seen.add(c.key)

    @property
    def num_clauses(self) -> int:
        return len(self.clauses)

    @cached_property
    def table(self) -> "ClauseTable":
        return ClauseTable.from_literals(
            self.num_vars,
            [c.variables for c in self.clauses],
            [c.negated for c in self.clauses],
            np.ones(len(self.clauses), dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# Polynomial costs
# ---------------------------------------------------------------------------


def _canonical_terms(terms, domain: Domain) -> tuple[dict[tuple[int, ...], float], float]:
    merged: dict[tuple[int, ...], float] = {}
    for coeff, variables in terms:
        key = tuple(sorted(int(v) for v in variables))
        if len(set(key)) != len(key):
            raise ValueError(f"repeated variable in term {variables}")
        merged[key] = merged.get(key, 0.0) + float(coeff)
    constant = merged.pop((), 0.0)
    return {k: c for k, c in merged.items() if c != 0.0}, constant


@dataclass(frozen=True, eq=False)
class PolyCost:
    """Polynomial cost ``sum_T c_T prod_{i in T} v_i + constant``.

    ``terms`` maps sorted variable tuples to coefficients.  Duplicate terms are
    merged at construction and zero coefficients are dropped.
    """

    domain: Domain
    num_vars: int
    terms: dict = field(default_factory=dict)
    constant: float = 0.0

    def __post_init__(self):
        if self.domain not in ("binary", "spin"):
            raise ValueError(f"unknown domain {self.domain!r}")
        items = self.terms.items() if isinstance(self.terms, dict) else [(v, c) for c, v in self.terms]
        merged, extra = _canonical_terms(((c, v) for v, c in items), self.domain)
        for key in merged:
            if key[-1] >= self.num_vars:
                raise ValueError(f"term {key} references a variable >= N={self.num_vars}")
        object.__setattr__(self, "terms", merged)
        object.__setattr__(self, "constant", float(self.constant) + extra)

    @classmethod
    def from_terms(cls, domain: Domain, num_vars: int, terms: Iterable[tuple[float, Sequence[int]]],
                   constant: float = 0.0) -> "PolyCost":
        return cls(domain, num_vars, [(c, v) for c, v in terms], constant)

    def __eq__(self, other):
        if not isinstance(other, PolyCost):
            return NotImplemented
        return (self.domain == other.domain and self.num_vars == other.num_vars
                and self.constant == other.constant and self.terms == other.terms)

    def isclose(self, other: "PolyCost", tol: float = 1e-12) -> bool:
        if self.domain != other.domain or self.num_vars != other.num_vars:
            return False
        if abs(self.constant - other.constant) > tol:
            return False
        keys = set(self.terms) | set(other.terms)
        return all(abs(self.terms.get(k, 0.0) - other.terms.get(k, 0.0)) <= tol for k in keys)

    @property
    def order(self) -> int:
        return max((len(k) for k in self.terms), default=0)

    def to_binary(self) -> "PolyCost":
        """Substitute ``sigma = 2x - 1`` and re-expand."""
        if self.domain == "binary":
            return self
        out: list[tuple[float, tuple[int, ...]]] = []
        for key, c in self.terms.items():
            p = len(key)
            for r in range(p + 1):
                for sub in itertools.combinations(key, r):
                    out.append((c * (2.0 ** r) * (-1.0) ** (p - r), sub))
        return PolyCost.from_terms("binary", self.num_vars, out, self.constant)

    def to_spin(self) -> "PolyCost":
        """Substitute ``x = (1 + sigma) / 2`` and re-expand."""
        if self.domain == "spin":
            return self
        out: list[tuple[float, tuple[int, ...]]] = []
        for key, c in self.terms.items():
            scale = c / (2.0 ** len(key))
            for r in range(len(key) + 1):
                for sub in itertools.combinations(key, r):
                    out.append((scale, sub))
        return PolyCost.from_terms("spin", self.num_vars, out, self.constant)

    @cached_property
    def table(self) -> "ClauseTable":
        binary = self.to_binary()
        keys = list(binary.terms)
        return ClauseTable.from_literals(
            self.num_vars,
            keys,
            [(True,) * len(k) for k in keys],
            np.array([binary.terms[k] for k in keys], dtype=np.float64),
            constant=binary.constant,
        )


Model = Union[CnfFormula, PolyCost]


# ---------------------------------------------------------------------------
# Compiled table
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClauseTable:
    """CSR arrays for factor membership and its transpose (variable incidence)."""

    num_vars: int
    cl_ptr: np.ndarray
    cl_var: np.ndarray
    cl_neg: np.ndarray
    weight: np.ndarray
    v_ptr: np.ndarray
    v_cl: np.ndarray
    v_lit: np.ndarray
    constant: float = 0

    @classmethod
    def from_literals(cls, num_vars, variables, negated, weight, constant=0):
        widths = np.array([len(v) for v in variables], dtype=np.int64)
        cl_ptr = np.zeros(len(variables) + 1, dtype=np.int64)
        np.cumsum(widths, out=cl_ptr[1:])
        cl_var = np.fromiter(itertools.chain.from_iterable(variables), dtype=np.int64, count=int(cl_ptr[-1]))
        cl_neg = np.fromiter(itertools.chain.from_iterable(negated), dtype=np.int8, count=int(cl_ptr[-1]))
        owner = np.repeat(np.arange(len(variables), dtype=np.int64), widths)
        order = np.argsort(cl_var, kind="stable")
        counts = np.bincount(cl_var, minlength=num_vars) if cl_var.size else np.zeros(num_vars, np.int64)
        v_ptr = np.zeros(num_vars + 1, dtype=np.int64)
        np.cumsum(counts, out=v_ptr[1:])
        const = int(constant) if weight.dtype.kind == "i" else float(constant)
        return cls(num_vars, cl_ptr, cl_var, cl_neg, weight, v_ptr, owner[order], order.astype(np.int64), const)

    @property
    def arrays(self):
        return (self.cl_ptr, self.cl_var, self.cl_neg, self.weight)

    @property
    def incidence(self):
        return (self.v_ptr, self.v_cl, self.v_lit)

    @property
    def integer(self) -> bool:
        return self.weight.dtype.kind == "i"


def _bits(model: Model, a) -> np.ndarray:
    x = np.asarray(a)
    if x.ndim != 1 or x.shape[0] != model.num_vars:
        raise DimensionError(f"assignment has shape {x.shape}, model has N={model.num_vars}")
    return x.astype(np.int8, copy=False)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def energy(model: Model, a) -> float | int:
    """Exact cost of assignment ``a`` (unsat-clause count for CNF)."""
    x = _bits(model, a)
    if isinstance(model, CnfFormula):
        t = model.table
        return int(_kernels.factor_energies(x, *t.arrays).sum())
    if model.domain == "binary":
        vals = x.astype(np.float64)
    else:
        vals = 2.0 * x - 1.0
    total = model.constant
    for key, c in model.terms.items():
        total += c * float(np.prod(vals[list(key)]))
    return total


def energies(model: Model, xs) -> np.ndarray:
    """Exact cost of every row of ``xs`` (shape ``(R, N)``)."""
    x = np.asarray(xs)
    if x.ndim != 2 or x.shape[1] != model.num_vars:
        raise DimensionError(f"assignments have shape {x.shape}, model has N={model.num_vars}")
    x = x.astype(np.int8, copy=False)
    if isinstance(model, CnfFormula):
        return _kernels.batch_energies(x, *model.table.arrays)
    vals = x.astype(np.float64) if model.domain == "binary" else 2.0 * x - 1.0
    total = np.full(x.shape[0], float(model.constant))
    for key, c in model.terms.items():
        total += c * np.prod(vals[:, list(key)], axis=1)
    return total


def cnf_to_pubo(f: CnfFormula) -> PolyCost:
    """Expand the unsat indicator of each clause into a binary polynomial.

    A positive literal ``x_i`` contributes the factor ``(1 - x_i)`` and a
    negated literal contributes ``x_i``.
    """
    out: list[tuple[float, tuple[int, ...]]] = []
    for c in f.clauses:
        pos = [v for v, n in zip(c.variables, c.negated) if not n]
        neg = tuple(v for v, n in zip(c.variables, c.negated) if n)
        for r in range(len(pos) + 1):
            for sub in itertools.combinations(pos, r):
                out.append(((-1.0) ** r, neg + sub))
    return PolyCost.from_terms("binary", f.num_vars, out)


def delta_energy(model: Model, a, i: int) -> float | int:
    """``E(a with x_i flipped) - E(a)``, touching only the factors incident to ``i``."""
    x = _bits(model, a)
    t = model.table
    d = 0
    xi = x[i]
    for p in range(t.v_ptr[i], t.v_ptr[i + 1]):
        fac = t.v_cl[p]
        lo, hi = t.cl_ptr[fac], t.cl_ptr[fac + 1]
        others_true = False
        for q in range(lo, hi):
            if t.cl_var[q] != i and x[t.cl_var[q]] != t.cl_neg[q]:
                others_true = True
                break
        if others_true:
            continue
        # factor is active exactly when i's literal is false too
        lit_true = xi != t.cl_neg[t.v_lit[p]]
        d += t.weight[fac] if lit_true else -t.weight[fac]
    return int(d) if t.integer else float(d)


def local_fields(model: Model, a) -> np.ndarray:
    """``H_i = [E(x_i -> not x_i) - E(x)] / 2`` for every variable."""
    return IncrementalState(model, a).local_fields()


class IncrementalState:
    """Per-factor true-literal counts with cached flip deltas and energy.

    Single-owner mutable state; ``flip`` touches only incident factors.
    """

    def __init__(self, model: Model, a, debug: bool = False):
        self.model = model
        self.table = model.table
        self.debug = debug
        self.x = _bits(model, a).copy()
        self.reset(self.x)

    def reset(self, a) -> None:
        t = self.table
        self.x[:] = a
        self.tcount = np.zeros(len(t.weight), dtype=np.int32)
        self.delta = np.zeros(t.num_vars, dtype=t.weight.dtype)
        self.energy = _kernels.init_cache(self.x, *t.arrays, self.tcount, self.delta) + t.constant

    def delta_energy(self, i: int):
        if self.debug:
            self.check()
        return self.delta[i]

    def flip(self, i: int):
        d = _kernels.flip(i, self.x, self.tcount, self.delta, *self.table.arrays, *self.table.incidence)
        self.energy += d
        return d

    def local_fields(self) -> np.ndarray:
        return self.delta / 2.0

    def check(self, tol: float = 0.0) -> None:
        """Raise :class:`ConsistencyError` if the caches drifted from ``x``."""
        t = self.table
        tc = np.zeros_like(self.tcount)
        dl = np.zeros_like(self.delta)
        e = _kernels.init_cache(self.x.copy(), *t.arrays, tc, dl) + t.constant
        if not np.array_equal(tc, self.tcount):
            raise ConsistencyError("clause true-literal counts are stale")
        if np.max(np.abs(dl - self.delta), initial=0) > tol or abs(e - self.energy) > tol * max(1, len(t.weight)):
            raise ConsistencyError(f"cached energy {self.energy} vs recomputed {e}")


# ---------------------------------------------------------------------------
# Factor graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FactorGraph:
    num_vars: int
    factors: tuple[tuple[int, ...], ...]
    incidence: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.incidence) != self.num_vars:
            raise ValueError("incidence list length must equal N")

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(s) for s in self.incidence], dtype=np.int64)


def build_factor_graph(model: Model) -> FactorGraph:
    """One factor per clause (CNF) or per non-constant term (polynomial)."""
    if isinstance(model, CnfFormula):
        factors = tuple(c.variables for c in model.clauses)
    else:
        factors = tuple(model.terms)
    incidence: list[list[int]] = [[] for _ in range(model.num_vars)]
    for a, members in enumerate(factors):
        for i in members:
            incidence[i].append(a)
    return FactorGraph(model.num_vars, factors, tuple(tuple(s) for s in incidence))


# ---------------------------------------------------------------------------
# Text formats
# ---------------------------------------------------------------------------


def parse_dimacs(text: str) -> CnfFormula:
    """Parse DIMACS CNF.  Clauses may span lines; ``c`` lines are comments."""
    header = None
    clauses: list[Clause] = []
    current: list[int] = []
    start_line = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        if line.startswith("%"):
            break
        if line.startswith("p"):
            parts = line.split()
            if header is not None:
                raise DimacsError("second header line", lineno)
            if len(parts) != 4 or parts[1] != "cnf":
                raise DimacsError(f"malformed header {line!r}", lineno)
            try:
                header = (int(parts[2]), int(parts[3]))
            except ValueError:
                raise DimacsError(f"malformed header {line!r}", lineno) from None
            if header[0] < 0 or header[1] < 0:
                raise DimacsError(f"malformed header {line!r}", lineno)
            continue
        if header is None:
            raise DimacsError("clause before header", lineno)
        for tok in line.split():
            try:
                lit = int(tok)
            except ValueError:
                raise DimacsError(f"bad literal {tok!r}", lineno) from None
            if lit == 0:
                if not current:
                    raise DimacsError("empty clause", lineno)
                try:
                    clauses.append(Clause.from_dimacs(current))
                except ValueError as exc:
                    raise DimacsError(str(exc), start_line) from None
                current = []
                continue
            if abs(lit) > header[0]:
                raise DimacsError(f"literal {lit} exceeds N={header[0]}", lineno)
            if not current:
                start_line = lineno
            current.append(lit)
    if header is None:
        raise DimacsError("missing 'p cnf N M' header")
    if current:
        raise DimacsError("unterminated clause", start_line)
    if len(clauses) != header[1]:
        raise DimacsError(f"header declares {header[1]} clauses, found {len(clauses)}")
    try:
        return CnfFormula(header[0], tuple(clauses))
    except ValueError as exc:
        raise DimacsError(str(exc)) from None


def write_dimacs(f: CnfFormula, comments: Sequence[str] = ()) -> str:
    lines = [f"c {c}" for c in comments]
    lines.append(f"p cnf {f.num_vars} {f.num_clauses}")
    lines.extend(" ".join(map(str, c.to_dimacs())) + " 0" for c in f.clauses)
    return "\n".join(lines) + "\n"


def write_poly(p: PolyCost) -> str:
    """``p poly <domain> N T`` header, then ``coeff i1 ... ip`` (1-based) per term.

    The constant is written as a line holding only the coefficient.
    """
    lines = [f"p poly {p.domain} {p.num_vars} {len(p.terms) + (p.constant != 0.0)}"]
    if p.constant != 0.0:
        lines.append(repr(p.constant))
    for key, c in p.terms.items():
        lines.append(" ".join([repr(c)] + [str(i + 1) for i in key]))
    return "\n".join(lines) + "\n"


def parse_poly(text: str) -> PolyCost:
    header = None
    terms: list[tuple[float, tuple[int, ...]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        parts = line.split()
        if parts[0] == "p":
            if len(parts) != 5 or parts[1] != "poly" or parts[2] not in ("binary", "spin"):
                raise DimacsError(f"malformed header {line!r}", lineno)
            header = (parts[2], int(parts[3]), int(parts[4]))
            continue
        if header is None:
            raise DimacsError("term before header", lineno)
        try:
            coeff = float(parts[0])
            idx = tuple(int(t) - 1 for t in parts[1:])
        except ValueError:
            raise DimacsError(f"bad term {line!r}", lineno) from None
        if any(i < 0 or i >= header[1] for i in idx):
            raise DimacsError(f"variable index out of range in {line!r}", lineno)
        terms.append((coeff, idx))
    if header is None:
        raise DimacsError("missing 'p poly' header")
    if len(terms) != header[2]:
        raise DimacsError(f"header declares {header[2]} terms, found {len(terms)}")
    return PolyCost.from_terms(header[0], header[1], terms)
