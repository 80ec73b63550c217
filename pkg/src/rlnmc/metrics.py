"""Run records and benchmark metrics: POS, TTS99, bootstrap, residual energy, diversity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

RECORD_VERSION = 1


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    """Outcome of one replica on one instance.

    ``improvements`` holds ``(sweep, energy)`` pairs where the best-so-far
    energy dropped, starting with the initial state at sweep 0.
    """

    instance: object
    replica: int
    min_energy: float
    first_success: Optional[int]
    best_assignment: np.ndarray
    total_mcs: int
    final_energy: Optional[float] = None
    improvements: tuple = ()

    def min_energy_at(self, budget: float) -> float:
        """Best energy reached within the first ``budget`` sweeps."""
        if not self.improvements:
            return self.min_energy
        best = self.improvements[0][1]
        for sweep, e in self.improvements:
            if sweep > budget:
                break
            best = e
        return best

    def to_dict(self) -> dict:
        return {
            "version": RECORD_VERSION,
            "kind": "run",
            "instance": self.instance,
            "replica": int(self.replica),
            "min_energy": self.min_energy,
            "first_success": self.first_success,
            "total_mcs": int(self.total_mcs),
            "final_energy": self.final_energy,
            "best_assignment": "".join("1" if b else "0" for b in self.best_assignment),
            "improvements": [[int(s), e] for s, e in self.improvements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("version") != RECORD_VERSION:
            raise MetricsError(f"unsupported record version {d.get('version')!r}")
        return cls(
            instance=d["instance"],
            replica=d["replica"],
            min_energy=d["min_energy"],
            first_success=d["first_success"],
            best_assignment=np.frombuffer(d["best_assignment"].encode(), dtype=np.uint8) - ord("0"),
            total_mcs=d["total_mcs"],
            final_energy=d.get("final_energy"),
            improvements=tuple((int(s), e) for s, e in d.get("improvements", [])),
        )


def group_by_instance(records: Iterable[RunRecord]) -> dict:
    out: dict = {}
    for r in records:
        out.setdefault(r.instance, []).append(r)
    return out


# ---------------------------------------------------------------------------
# POS and TTS
# ---------------------------------------------------------------------------


def _check_one_instance(records: Sequence[RunRecord]):
    if len(records) == 0:
        raise MetricsError("no records")
    if len({r.instance for r in records}) > 1:
        raise MetricsError("records mix several instances")


def success_count(records: Sequence[RunRecord], budget: float) -> int:
    return sum(1 for r in records if r.first_success is not None and r.first_success <= budget)


def pos_at(records: Sequence[RunRecord], budget: float) -> float:
    """Fraction of replicas whose first success came within ``budget`` sweeps."""
    _check_one_instance(records)
    return success_count(records, budget) / len(records)


def tts99(pos: float, tau: float) -> Optional[float]:
    """Total cost to succeed at least once with probability 0.99; ``None`` if ``pos == 0``."""
    if not 0.0 <= pos <= 1.0:
        raise MetricsError(f"pos must lie in [0, 1], got {pos}")
    if pos > 0.99:
        return float(tau)
    if pos == 0.0:
        return None
    return tau * math.log(0.01) / math.log1p(-pos)


def _tts_array(pos: np.ndarray, tau: float) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    out = np.full(pos.shape, np.inf)
    ok = pos > 0
    with np.errstate(divide="ignore"):
        out[ok] = tau * math.log(0.01) / np.log1p(-np.minimum(pos[ok], 1.0))
    out[pos > 0.99] = tau
    return out


def tau_with_overhead(mcs: float, n_jumps: int, overhead_per_jump: float) -> float:
    """Per-run cost charging ``overhead_per_jump`` sweep-equivalents for each policy call."""
    return mcs + n_jumps * overhead_per_jump


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


Statistic = Literal["tts", "tts_min", "residual"]


def residual_energy(records: Sequence[RunRecord], budget: Optional[float] = None) -> float:
    """Mean over replicas of the minimum energy reached (within ``budget``)."""
    _check_one_instance(records)
    if budget is None:
        return float(np.mean([r.min_energy for r in records]))
    return float(np.mean([r.min_energy_at(budget) for r in records]))


def bootstrap_percentile(instances: Sequence[Sequence[RunRecord]], statistic: Statistic = "tts",
                         x: float = 0.5, n_boot: int = 1000, seed: int = 0,
                         budget: Optional[float] = None, budgets: Optional[Sequence[float]] = None,
                         tau: Optional[float] = None) -> tuple[float, float]:
    """Mean and standard deviation over bootstrap rounds of the ``x`` percentile.

    Each round resamples instances with replacement.  For the TTS statistics
    every instance's success probability is redrawn from
    ``Beta(N_success + 0.5, N_failure + 0.5)``.  ``tau`` overrides the per-run
    cost (defaults to the budget).  ``tts_min`` takes the minimum of the
    percentile curve over ``budgets``.
    """
    if len(instances) == 0:
        raise MetricsError("need at least one instance")
    rng = np.random.default_rng(seed)
    n_inst = len(instances)
    pick = rng.integers(0, n_inst, size=(n_boot, n_inst))
    if statistic == "residual":
        vals = np.array([residual_energy(recs, budget) for recs in instances])
        per_round = np.quantile(vals[pick], x, axis=1)
    elif statistic in ("tts", "tts_min"):
        if statistic == "tts":
            if budget is None:
                raise MetricsError("tts statistic needs a budget")
            grid = [budget]
        else:
            if not budgets:
                raise MetricsError("tts_min statistic needs budgets")
            grid = list(budgets)
        curves = []
        for b in grid:
            ns = np.array([success_count(recs, b) for recs in instances], dtype=np.float64)
            nf = np.array([len(recs) for recs in instances], dtype=np.float64) - ns
            pos = rng.beta(ns[pick] + 0.5, nf[pick] + 0.5)
            t = _tts_array(pos, b if tau is None or statistic == "tts_min" else tau)
            curves.append(np.quantile(t, x, axis=1))
        per_round = np.min(np.vstack(curves), axis=0)
    else:
        raise MetricsError(f"unknown statistic {statistic!r}")
    return float(np.mean(per_round)), float(np.std(per_round))


# ---------------------------------------------------------------------------
# Maximum independent set
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MisResult:
    size: int
    exact: bool
    nodes: int


class _NodeBudget(Exception):
    pass


def _neighbor_masks(adj) -> list[int]:
    a = np.asarray(adj, dtype=bool)
    n = a.shape[0]
    masks = []
    for i in range(n):
        row = a[i].copy()
        row[i] = False
        m = 0
        for j in np.flatnonzero(row):
            m |= 1 << int(j)
        masks.append(m)
    for i in range(n):
        for j in range(n):
            if (masks[i] >> j) & 1 and not (masks[j] >> i) & 1:
                raise MetricsError("adjacency must be symmetric")
    return masks


def _bits_of(mask: int):
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def _greedy(nbr: list[int], cand: int) -> int:
    size = 0
    while cand:
        v = min(_bits_of(cand), key=lambda u: (nbr[u] & cand).bit_count())
        cand &= ~((1 << v) | nbr[v])
        size += 1
    return size


def greedy_independent_set(adj) -> int:
    nbr = _neighbor_masks(adj)
    return _greedy(nbr, (1 << len(nbr)) - 1)


def mis_exact(adj, node_cap: int = 2_000_000) -> MisResult:
    """Maximum independent set size by branch and bound.

    Branches on a maximum-degree vertex, folds degree-0/1 vertices greedily
    (always safe), and prunes with ``alpha <= n - m / max_degree``.  When the
    node budget runs out the best size found so far is returned with
    ``exact=False``.
    """
    nbr = _neighbor_masks(adj)
    n = len(nbr)
    full = (1 << n) - 1
    best = _greedy(nbr, full)
    nodes = 0

    def rec(cand: int, size: int):
        nonlocal best, nodes
        nodes += 1
        if nodes > node_cap:
            raise _NodeBudget
        changed = True
        while changed and cand:
            changed = False
            for v in _bits_of(cand):
                if not (cand >> v) & 1:
                    continue
                d = (nbr[v] & cand).bit_count()
                if d <= 1:
                    cand &= ~((1 << v) | nbr[v])
                    size += 1
                    changed = True
        if not cand:
            best = max(best, size)
            return
        degs = {v: (nbr[v] & cand).bit_count() for v in _bits_of(cand)}
        k = len(degs)
        m2 = sum(degs.values())
        v, dmax = max(degs.items(), key=lambda kv: kv[1])
        upper = k - math.ceil(m2 / 2 / dmax)
        if size + upper <= best:
            return
        rec(cand & ~((1 << v) | nbr[v]), size + 1)
        rec(cand & ~(1 << v), size)

    try:
        rec(full, 0)
    except _NodeBudget:
        return MisResult(best, False, nodes)
    return MisResult(best, True, nodes)


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------


@dataclass
class DiversityResult:
    radii: np.ndarray
    values: np.ndarray
    integral: float
    n_solutions: int
    exact: bool = True


def pairwise_hamming(solutions: np.ndarray) -> np.ndarray:
    s = 2.0 * np.asarray(solutions, dtype=np.float64) - 1.0
    n = s.shape[1]
    return np.rint((n - s @ s.T) / 2.0).astype(np.int64)


def diversity(solutions, r_min: float = 0.02, r_max: float = 0.5, step: float = 0.02,
              node_cap: int = 2_000_000) -> DiversityResult:
    """R-averaged MIS size of the solution-similarity graph, left-endpoint rule.

    Identical solutions are merged first.  Two solutions are adjacent in
    ``G(R)`` when their normalized Hamming distance is ``<= R``.
    """
    n_pts = int(round((r_max - r_min) / step))
    radii = r_min + step * np.arange(n_pts)
    sols = np.asarray(solutions)
    if sols.size == 0 or len(sols) == 0:
        return DiversityResult(radii, np.zeros(n_pts, dtype=np.int64), 0.0, 0)
    sols = np.unique(sols.astype(np.int8), axis=0)
    n_var = sols.shape[1]
    dist = pairwise_hamming(sols)
    values = np.zeros(n_pts, dtype=np.int64)
    exact = True
    cache: dict[int, int] = {}
    for j, r in enumerate(radii):
        thr = int(math.floor(r * n_var + 1e-9))
        if thr not in cache:
            res = mis_exact(dist <= thr, node_cap=node_cap)
            exact &= res.exact
            cache[thr] = res.size
        values[j] = cache[thr]
    return DiversityResult(radii, values, float(values.mean()), len(sols), exact)


# ---------------------------------------------------------------------------
# Trajectory diagnostics
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryDiagnostics:
    window_start: np.ndarray
    basin_energy: np.ndarray
    distance_to_best: np.ndarray
    basin_states: np.ndarray


def trajectory_diagnostics(sweeps, energies, states, window: int) -> TrajectoryDiagnostics:
    """Per-window minimum energy and its normalized distance to the best state so far.

    A window longer than the trace collapses to a single window.
    """
    sweeps = np.asarray(sweeps)
    energies = np.asarray(energies, dtype=np.float64)
    states = np.asarray(states)
    n = len(energies)
    if window <= 0:
        raise MetricsError("window must be positive")
    window = min(window, max(n, 1))
    starts, basin_e, dist, basin_x = [], [], [], []
    best_e, best_x = math.inf, None
    n_var = states.shape[1] if states.ndim == 2 else 0
    for lo in range(0, n, window):
        seg = energies[lo:lo + window]
        j = lo + int(np.argmin(seg))
        e, xj = energies[j], states[j]
        if e < best_e:
            best_e, best_x = e, xj
        starts.append(sweeps[lo])
        basin_e.append(e)
        basin_x.append(xj)
        dist.append(np.count_nonzero(xj != best_x) / n_var if n_var else 0.0)
    return TrajectoryDiagnostics(np.asarray(starts), np.asarray(basin_e), np.asarray(dist),
                                 np.asarray(basin_x))
