"""Single-flip MCMC sweeps and the linear-beta simulated annealing driver."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _kernels
from .metrics import RunRecord
from .problem import IncrementalState, Model
from .rng import stream

BLOCK = 512

RULES = ("metropolis", "gibbs")


@dataclass(frozen=True)
class Schedule:
    """Linear schedule in inverse temperature, advanced once per sweep.

    Sweep ``t`` (0-based) runs at ``beta(t) = beta_i + t * delta``, with
    ``delta = (beta_f - beta_i) / total_sweeps``.
    """

    beta_i: float
    beta_f: float
    total_sweeps: int

    def __post_init__(self):
        if self.beta_i > self.beta_f:
            raise ValueError("beta_i must not exceed beta_f")
        if self.total_sweeps < 0:
            raise ValueError("total_sweeps must be non-negative")

    @property
    def delta(self) -> float:
        if self.total_sweeps == 0:
            return 0.0
        return (self.beta_f - self.beta_i) / self.total_sweeps

    def beta(self, t: float) -> float:
        return self.beta_i + t * self.delta

    def betas(self) -> np.ndarray:
        return self.beta_i + np.arange(self.total_sweeps) * self.delta


@dataclass(frozen=True)
class SuccessCriterion:
    """A replica succeeds once its energy is at or below ``threshold``."""

    threshold: float = 0

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")

    def met(self, e) -> bool:
        return e <= self.threshold


def metropolis_acceptance(d_e: float, beta: float) -> float:
    return 1.0 if d_e <= 0 else math.exp(-beta * d_e)


def gibbs_flip_probability(d_e: float, beta: float) -> float:
    z = beta * d_e
    if z > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(z))


class Trace:
    """End-of-sweep energies, optionally with the full state after each sweep."""

    def __init__(self, states: bool = True):
        self.states = states
        self._sweeps: list[np.ndarray] = []
        self._energies: list[np.ndarray] = []
        self._x: list[np.ndarray] = []

    def extend(self, sweeps, energies, xs=None):
        self._sweeps.append(np.asarray(sweeps, dtype=np.int64))
        self._energies.append(np.asarray(energies, dtype=np.float64))
        if self.states:
            self._x.append(np.array(xs, dtype=np.int8, copy=True).reshape(len(sweeps), -1))

    @property
    def sweeps(self) -> np.ndarray:
        return np.concatenate(self._sweeps) if self._sweeps else np.zeros(0, np.int64)

    @property
    def energies(self) -> np.ndarray:
        return np.concatenate(self._energies) if self._energies else np.zeros(0)

    @property
    def assignments(self) -> np.ndarray:
        return np.concatenate(self._x) if self._x else np.zeros((0, 0), np.int8)


class ChainState(IncrementalState):
    """One replica: assignment, clause caches, best-so-far record, RNG stream.

    ``sweeps`` counts consumed Monte Carlo sweeps (MCS).  ``improvements``
    lists ``(sweep, energy)`` every time the best-so-far energy drops.
    """

    def __init__(self, model: Model, bits, rng: np.random.Generator,
                 criterion: Optional[SuccessCriterion] = None):
        super().__init__(model, bits)
        self.rng = rng
        self.target = -math.inf if criterion is None else float(criterion.threshold)
        self.sweeps = 0
        self.best_x = self.x.copy()
        self._best = np.array([self.energy, 0.0, -1.0])
        if self.energy <= self.target:
            self._best[2] = 0
        self.improvements: list[tuple[int, float]] = [(0, self._num(self.energy))]
        self._no_frozen = np.zeros(self.table.num_vars, dtype=bool)
        self._no_states = np.zeros((0, self.table.num_vars), dtype=np.int8)

    def _num(self, e):
        return int(e) if self.table.integer else float(e)

    @property
    def num_vars(self) -> int:
        return self.table.num_vars

    @property
    def best_energy(self):
        return self._num(self._best[0])

    @property
    def best_sweep(self) -> int:
        return int(self._best[1])

    @property
    def first_success(self) -> Optional[int]:
        return None if self._best[2] < 0 else int(self._best[2])

    def sweep(self, betas, rule: str = "metropolis", frozen=None, trace: Optional[Trace] = None) -> None:
        """Run one sweep per entry of ``betas``; ``frozen`` variables are skipped."""
        if rule not in RULES:
            raise ValueError(f"unknown sweep rule {rule!r}")
        betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
        frozen = self._no_frozen if frozen is None else np.asarray(frozen, dtype=bool)
        t = self.table
        n = self.num_vars
        for start in range(0, len(betas), BLOCK):
            b = betas[start:start + BLOCK]
            m = len(b)
            u = self.rng.random((m, n))
            te = np.empty(m)
            tb = np.empty(m)
            record = trace is not None and trace.states
            tx = np.empty((m, n), dtype=np.int8) if record else self._no_states
            prev_best = self._best[0]
            self.energy = _kernels.run_sweeps(
                self.x, self.tcount, self.delta, self.energy, *t.arrays, *t.incidence,
                b, u, frozen, rule == "gibbs", self.target, self.sweeps,
                self.best_x, self._best, te, tb, tx, record,
            )
            drops = np.flatnonzero(np.diff(np.concatenate(([prev_best], tb))) < 0)
            self.improvements.extend((self.sweeps + int(j) + 1, self._num(tb[j])) for j in drops)
            if trace is not None:
                trace.extend(self.sweeps + 1 + np.arange(m), te, tx if record else None)
            self.sweeps += m

    def assign(self, idx, values) -> float:
        """Set ``x[idx] = values`` as one move; caches follow, best is not checked."""
        idx = np.asarray(idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.int8)
        d = _kernels.assign(idx, values, self.x, self.tcount, self.delta, *self.table.arrays, *self.table.incidence)
        self.energy += d
        return d

    def advance(self, n_mcs: int = 1, trace: Optional[Trace] = None) -> None:
        """Charge ``n_mcs`` sweeps for a non-sweep move and score the current state."""
        self.sweeps += n_mcs
        self.note_state()
        if trace is not None:
            trace.extend([self.sweeps], [self.energy], self.x[None, :] if trace.states else None)

    def note_state(self) -> None:
        if self.energy < self._best[0]:
            self._best[0] = self.energy
            self._best[1] = self.sweeps
            self.best_x[:] = self.x
            self.improvements.append((self.sweeps, self._num(self.energy)))
        if self._best[2] < 0 and self.energy <= self.target:
            self._best[2] = self.sweeps

    def restore(self, bits) -> None:
        """Replace the current state (caches recomputed); records are untouched."""
        self.reset(np.asarray(bits, dtype=np.int8))

    def to_record(self, instance, replica: int) -> RunRecord:
        return RunRecord(
            instance=instance,
            replica=replica,
            min_energy=self.best_energy,
            first_success=self.first_success,
            best_assignment=self.best_x.copy(),
            total_mcs=self.sweeps,
            final_energy=self._num(self.energy),
            improvements=tuple(self.improvements),
        )


def metropolis_sweep(chain: ChainState, beta: float) -> ChainState:
    chain.sweep([beta], "metropolis")
    return chain


def gibbs_sweep(chain: ChainState, beta: float) -> ChainState:
    chain.sweep([beta], "gibbs")
    return chain


def init_chain(model: Model, seed: int, replica: int, criterion: Optional[SuccessCriterion] = None) -> ChainState:
    """Uniform random start from the replica's ``init`` stream; sweeps use its ``mc`` stream."""
    x0 = stream(seed, replica, "init").integers(0, 2, size=model.num_vars, dtype=np.int8)
    return ChainState(model, x0, stream(seed, replica, "mc"), criterion)


def run_sa(model: Model, schedule: Schedule, criterion: Optional[SuccessCriterion], n_replicas: int,
           seed: int, rule: str = "metropolis", instance=0, betas: Optional[Sequence[float]] = None,
           replicas: Optional[Iterable[int]] = None, traces: Optional[dict] = None) -> list[RunRecord]:
    """Independent annealing runs, one per replica, returned in replica order.

    ``betas`` overrides the per-sweep inverse temperatures of ``schedule``.
    ``replicas`` selects (and orders) which replica indices to evaluate.
    ``traces`` maps replica index to a :class:`Trace` to fill.
    """
    b = schedule.betas() if betas is None else np.asarray(betas, dtype=np.float64)
    order = range(n_replicas) if replicas is None else list(replicas)
    out = {}
    for r in order:
        chain = init_chain(model, seed, r, criterion)
        tr = traces.get(r) if traces else None
        if tr is not None:
            tr.extend([0], [chain.energy], chain.x[None, :] if tr.states else None)
        chain.sweep(b, rule, trace=tr)
        out[r] = chain.to_record(instance, r)
    return [out[r] for r in sorted(out)]
