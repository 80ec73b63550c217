"""Random k-SAT benchmark generators (uniform and scale-free)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .problem import Clause, CnfFormula


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    """Instance family parameters.

    Give either ``m`` or ``alpha``; ``m = round(alpha * n)`` when only the
    ratio is set.  ``b`` is the power-law exponent of the scale-free family.
    """

    n: int
    k: int = 4
    m: Optional[int] = None
    alpha: Optional[float] = None
    family: Literal["uniform", "scale-free"] = "uniform"
    b: float = 3.0
    seed: int = 0
    require_sat: bool = False

    def __post_init__(self):
        if self.m is None and self.alpha is None:
            raise GenerationError("one of m or alpha is required")
        if self.family not in ("uniform", "scale-free"):
            raise GenerationError(f"unknown family {self.family!r}")
        if self.k < 1 or self.k > self.n:
            raise GenerationError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        if self.family == "scale-free" and not self.b > 2:
            raise GenerationError("power-law exponent b must exceed 2")
        if self.num_clauses > math.comb(self.n, self.k) * 2 ** self.k:
            raise GenerationError(f"only {math.comb(self.n, self.k) * 2 ** self.k} distinct clauses exist")
        if self.require_sat and self.n > 24:
            raise GenerationError("require_sat uses exhaustive search and is limited to n <= 24")

    @property
    def num_clauses(self) -> int:
        if self.m is not None:
            return int(self.m)
        return int(round(self.alpha * self.n))


def powerlaw_weights(n: int, b: float, normalize: bool = True) -> np.ndarray:
    """Selection weights ``(1/n) (b-2)/(b-1) (n/i)^(1/(b-1))`` for ``i = 1..n``."""
    i = np.arange(1, n + 1, dtype=np.float64)
    if math.isinf(b):
        p = np.full(n, 1.0 / n)
    else:
        p = (b - 2.0) / (b - 1.0) / n * (n / i) ** (1.0 / (b - 1.0))
    if normalize:
        p = p / p.sum()
    return p


def _draw_clauses(spec: GeneratorSpec, rng: np.random.Generator, pick) -> CnfFormula:
    clauses: list[Clause] = []
    seen: set = set()
    while len(clauses) < spec.num_clauses:
        variables = pick()
        negated = rng.integers(0, 2, size=spec.k).astype(bool)
        c = Clause(tuple(int(v) for v in variables), tuple(negated.tolist()))
        if c.key in seen:
            continue
        seen.add(c.key)
        clauses.append(c)
    return CnfFormula(spec.n, tuple(clauses))


def _with_sat_filter(spec: GeneratorSpec, build) -> CnfFormula:
    rng = np.random.default_rng(spec.seed)
    while True:
        f = build(rng)
        if not spec.require_sat or is_satisfiable_bruteforce(f):
            return f


def gen_uniform_ksat(spec: GeneratorSpec) -> CnfFormula:
    """``k`` distinct uniformly drawn variables per clause, fair independent negations."""
    if spec.family != "uniform":
        raise GenerationError("spec.family must be 'uniform'")

    def build(rng):
        return _draw_clauses(spec, rng, lambda: rng.choice(spec.n, size=spec.k, replace=False))

    return _with_sat_filter(spec, build)


def gen_scalefree_ksat(spec: GeneratorSpec) -> CnfFormula:
    """Variables drawn by sequential power-law weighted sampling without replacement."""
    if spec.family != "scale-free":
        raise GenerationError("spec.family must be 'scale-free'")
    p = powerlaw_weights(spec.n, spec.b)

    def build(rng):
        def pick():
            w = p.copy()
            out = np.empty(spec.k, dtype=np.int64)
            for t in range(spec.k):
                c = np.cumsum(w)
                j = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
                j = min(j, spec.n - 1)
                while w[j] == 0.0:  # guard against landing on a removed slot by rounding
                    j -= 1
                out[t] = j
                w[j] = 0.0
            return out

        return _draw_clauses(spec, rng, pick)

    return _with_sat_filter(spec, build)


def generate(spec: GeneratorSpec) -> CnfFormula:
    if spec.family == "uniform":
        return gen_uniform_ksat(spec)
    return gen_scalefree_ksat(spec)


def frequency_profile(f: CnfFormula) -> np.ndarray:
    """Occurrence count of every variable across all clauses."""
    counts = np.zeros(f.num_vars, dtype=np.int64)
    for c in f.clauses:
        counts[list(c.variables)] += 1
    return counts


def is_satisfiable_bruteforce(f: CnfFormula) -> bool:
    """Exhaustive check over all ``2^N`` assignments (chunked, ``N <= 24``)."""
    n = f.num_vars
    if n > 24:
        raise GenerationError("exhaustive satisfiability check limited to N <= 24")
    chunk = 1 << min(n, 20)
    for start in range(0, 1 << n, chunk):
        idx = np.arange(start, start + chunk, dtype=np.int64)
        ok = np.ones(chunk, dtype=bool)
        for c in f.clauses:
            sat = np.zeros(chunk, dtype=bool)
            for v, neg in zip(c.variables, c.negated):
                bit = ((idx >> v) & 1).astype(bool)
                sat |= ~bit if neg else bit
            ok &= sat
            if not ok.any():
                break
        if ok.any():
            return True
    return False
