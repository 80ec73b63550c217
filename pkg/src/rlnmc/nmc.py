"""Nonlocal Monte Carlo jumps on top of simulated annealing.

A jump excites a backbone (a set of variables judged rigid in the current
basin) by giving each one a fresh fair random value, relaxes the remaining
variables with the backbone frozen, and then sweeps everything at the base
temperature.  The driver anneals normally up to ``beta_nmc`` and spends the
rest of the budget on jumps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .anneal import ChainState, Schedule, SuccessCriterion, Trace, init_chain
from .metrics import RECORD_VERSION, RunRecord
from .problem import Model
from .rng import stream


class NmcConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NmcConfig:
    """Jump hyperparameters.  One jump costs ``n_cycles * n_sw`` sweeps."""

    r: float = 4.5
    n_cycles: int = 3
    n_sw: int = 100
    beta_nmc: float = 5.0
    n_steps: int = 53
    jump_fallback_to_input: bool = False

    def __post_init__(self):
        if self.r < 0:
            raise NmcConfigError("threshold r must be >= 0")
        if self.n_sw < 2:
            raise NmcConfigError("n_sw must be >= 2: the backbone and non-backbone stages use one sweep each")
        if self.n_cycles < 1:
            raise NmcConfigError("n_cycles must be >= 1")
        if self.n_steps < 0:
            raise NmcConfigError("n_steps must be >= 0")

    @property
    def jump_cost(self) -> int:
        return self.n_cycles * self.n_sw

    @property
    def phase_cost(self) -> int:
        return self.n_steps * self.jump_cost


@dataclass
class JumpStats:
    """First-cycle excitation of one jump.

    ``distance`` is the fraction of variables changed by the backbone stage
    and ``excitation`` the energy it added.
    """

    replica: int
    step: int
    beta: float
    backbone_fraction: float
    distance: float
    excitation: float
    energy_after: float

    def to_dict(self) -> dict:
        return {"version": RECORD_VERSION, "kind": "jump", **asdict(self)}


def threshold_backbone(fields, r: float) -> np.ndarray:
    """Backbone mask ``|H_i| > r``."""
    return np.abs(np.asarray(fields)) > r


def _check_mask(chain: ChainState, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (chain.num_vars,):
        raise NmcConfigError(f"mask has shape {mask.shape}, expected ({chain.num_vars},)")
    return mask


def nmc_jump(chain: ChainState, mask, beta: float, config: NmcConfig, rng: np.random.Generator,
             rule: str = "metropolis", trace: Optional[Trace] = None, replica: int = 0,
             step: int = 0) -> tuple[ChainState, JumpStats]:
    """Run ``config.n_cycles`` chained cycles of excitation and relaxation at ``beta``.

    The chain ends in the lowest-energy end-of-cycle state (earliest on ties)
    unless ``jump_fallback_to_input`` is set and no cycle beat the input.
    The chain's best-so-far record sees every intermediate state.
    """
    mask = _check_mask(chain, mask)
    if config.n_sw < 2:
        raise NmcConfigError("n_sw must be >= 2")
    idx = np.flatnonzero(mask)
    n = chain.num_vars
    start_x, start_e = chain.x.copy(), chain.energy
    full = np.full(config.n_sw - 2, beta)
    ends: list[tuple[float, np.ndarray]] = []
    distance = excitation = 0.0
    for cycle in range(config.n_cycles):
        before_x, before_e = chain.x.copy(), chain.energy
        if idx.size:
            chain.assign(idx, rng.integers(0, 2, size=idx.size, dtype=np.int8))
        chain.advance(1, trace)
        if cycle == 0:
            distance = np.count_nonzero(chain.x != before_x) / n if n else 0.0
            excitation = chain.energy - before_e
        chain.sweep([beta], rule, frozen=mask, trace=trace)
        if full.size:
            chain.sweep(full, rule, trace=trace)
        ends.append((chain.energy, chain.x.copy()))
    best = min(range(len(ends)), key=lambda c: (ends[c][0], c))
    target_e, target_x = ends[best]
    if config.jump_fallback_to_input and not target_e < start_e:
        target_e, target_x = start_e, start_x
    if not np.array_equal(target_x, chain.x):
        chain.restore(target_x)
    stats = JumpStats(replica, step, float(beta), idx.size / n if n else 0.0, float(distance),
                      float(excitation), float(chain.energy))
    return chain, stats


# ---------------------------------------------------------------------------
# Backbone policies
# ---------------------------------------------------------------------------


class BackbonePolicy(Protocol):
    def reset(self, model: Model, replicas: Sequence[int], seed: int) -> None: ...

    def masks(self, step: int, chains: Sequence[ChainState], beta: float) -> list[np.ndarray]: ...


class ThresholdPolicy:
    """Local-field threshold rule ``|H_i| > r``."""

    def __init__(self, r: float):
        self.r = r

    def reset(self, model, replicas, seed):
        pass

    def masks(self, step, chains, beta):
        return [threshold_backbone(c.local_fields(), self.r) for c in chains]


class RandomMaskPolicy:
    """Each variable joins the backbone independently with probability ``fraction``."""

    def __init__(self, fraction: float):
        self.fraction = fraction

    def reset(self, model, replicas, seed):
        self._rngs = [stream(seed, r, "action") for r in replicas]

    def masks(self, step, chains, beta):
        return [rng.random(c.num_vars) < self.fraction for rng, c in zip(self._rngs, chains)]


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def nmc_phase_betas(schedule: Schedule, config: NmcConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-sweep betas of the annealing phase and the constant beta of each jump.

    The annealing phase gets whatever the jumps leave of ``total_sweeps`` and
    runs linearly from ``beta_i`` to ``beta_nmc``; jump ``t`` runs at
    ``beta_nmc + t (beta_f - beta_nmc) / n_steps``.
    """
    if not schedule.beta_i <= config.beta_nmc <= schedule.beta_f:
        raise NmcConfigError("need beta_i <= beta_nmc <= beta_f")
    n_sa = schedule.total_sweeps - config.phase_cost
    if n_sa < 0:
        raise NmcConfigError(
            f"jumps need {config.phase_cost} sweeps but the schedule only has {schedule.total_sweeps}")
    sa = schedule.beta_i + np.arange(n_sa) * ((config.beta_nmc - schedule.beta_i) / n_sa if n_sa else 0.0)
    step = (schedule.beta_f - config.beta_nmc) / config.n_steps if config.n_steps else 0.0
    jumps = config.beta_nmc + np.arange(config.n_steps) * step
    return sa, jumps


def budget_split(schedule: Schedule, config: NmcConfig) -> dict:
    """Sweep accounting of a run: annealing phase, jump phase and their fractions."""
    sa, _ = nmc_phase_betas(schedule, config)
    total = len(sa) + config.phase_cost
    return {
        "sa_sweeps": len(sa),
        "nmc_sweeps": config.phase_cost,
        "total_sweeps": total,
        "sa_fraction": len(sa) / total if total else 0.0,
        "nmc_fraction": config.phase_cost / total if total else 0.0,
    }


def run_nmc(model: Model, schedule: Schedule, criterion: Optional[SuccessCriterion], config: NmcConfig,
            policy: Optional[BackbonePolicy] = None, n_replicas: int = 1, seed: int = 0,
            rule: str = "metropolis", instance=0, replicas: Optional[Iterable[int]] = None,
            traces: Optional[dict] = None) -> tuple[list[RunRecord], list[JumpStats]]:
    """Anneal to ``beta_nmc``, then alternate policy calls and jumps.

    Replicas advance in lockstep so batched policies see all of them at once.
    Local fields are refreshed before every policy call.
    """
    sa_betas, jump_betas = nmc_phase_betas(schedule, config)
    policy = ThresholdPolicy(config.r) if policy is None else policy
    order = list(range(n_replicas)) if replicas is None else list(replicas)
    chains = [init_chain(model, seed, r, criterion) for r in order]
    bb_rngs = [stream(seed, r, "backbone") for r in order]
    trs = [traces.get(r) if traces else None for r in order]
    for chain, tr in zip(chains, trs):
        if tr is not None:
            tr.extend([0], [chain.energy], chain.x[None, :] if tr.states else None)
        chain.sweep(sa_betas, rule, trace=tr)
    policy.reset(model, order, seed)
    stats: list[JumpStats] = []
    for t, beta in enumerate(jump_betas):
        masks = policy.masks(t, chains, float(beta))
        for r, chain, mask, rng, tr in zip(order, chains, masks, bb_rngs, trs):
            _, js = nmc_jump(chain, mask, float(beta), config, rng, rule, tr, replica=r, step=t)
            stats.append(js)
    records = sorted((c.to_record(instance, r) for r, c in zip(order, chains)), key=lambda rec: rec.replica)
    stats.sort(key=lambda s: (s.replica, s.step))
    return records, stats
