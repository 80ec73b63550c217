"""PPO training of the backbone policy on batches of NMC replicas.

An episode on one instance starts every replica from a random state,
anneals it to ``beta_nmc`` and then applies ``n_nmc_steps`` policy-driven
jumps.  A replica that meets the success criterion starts a fresh episode
right away.  Every ``steps_per_update`` steps the collected segment feeds a
PPO update with truncated backpropagation through time.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .anneal import ChainState, Schedule, SuccessCriterion
from .nmc import NmcConfig, nmc_jump, nmc_phase_betas
from .policy import (
    PARAM_SHAPES,
    GradientError,
    PolicyInput,
    PolicyParams,
    PolicyState,
    dentropy,
    dlog_prob,
    entropy,
    init_params,
    log_prob,
    make_input,
    policy_forward,
    save_params,
    segment_backward,
    segment_forward,
)
from .problem import Model, build_factor_graph
from .rng import stream


class TrainingError(FloatingPointError):
    """Training diverged.  ``params`` holds the last finite parameters."""

    def __init__(self, message: str, params: Optional[PolicyParams] = None, update: int = -1):
        super().__init__(message)
        self.params = params
        self.update = update


@dataclass(frozen=True)
class PpoConfig:
    """PPO hyperparameters together with the annealing / jump settings of an episode.

    ``minibatch`` counts replica sequences: each minibatch holds whole
    segments of ``minibatch`` replicas.
    """

    lr_start: float = 1e-3
    lr_end: float = 1e-5
    epochs: int = 5
    minibatch: int = 64
    n_replicas: int = 2048
    n_sw: int = 100
    steps_per_update: int = 18
    n_eps: int = 5
    k_instances: int = 64
    n_train_reps: int = 5
    gamma: float = 0.75
    lam: float = 0.95
    c_vf: float = 0.25
    c_ent: float = 1e-3
    clip_eps: float = 0.25
    n_nmc_steps: int = 54
    max_grad_norm: float = 0.5
    beta_i: float = 2.0
    beta_nmc: float = 5.0
    beta_f: float = 8.0
    n_cycles: int = 3
    sa_sweeps: int = 14100
    success_threshold: float = 0
    rule: str = "metropolis"

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        for name in ("epochs", "minibatch", "n_replicas", "steps_per_update", "n_nmc_steps", "n_cycles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_train_reps < 0 or self.n_eps < 0 or self.sa_sweeps < 0:
            raise ValueError("counts must be non-negative")

    def nmc_config(self) -> NmcConfig:
        return NmcConfig(r=math.inf, n_cycles=self.n_cycles, n_sw=self.n_sw,
                         beta_nmc=self.beta_nmc, n_steps=self.n_nmc_steps)

    def schedule(self) -> Schedule:
        return Schedule(self.beta_i, self.beta_f, self.sa_sweeps + self.nmc_config().phase_cost)

    def criterion(self) -> SuccessCriterion:
        return SuccessCriterion(self.success_threshold)

    def updates_per_episode(self) -> int:
        return math.ceil(self.n_nmc_steps / self.steps_per_update)


PRESETS: dict[str, PpoConfig] = {
    "uniform": PpoConfig(
        lr_start=1e-3, lr_end=1e-4, epochs=5, minibatch=64, n_replicas=2048, n_sw=200,
        steps_per_update=17, n_eps=2, k_instances=64, n_train_reps=5, n_nmc_steps=51,
        beta_i=3.0, sa_sweeps=20000, success_threshold=1,
    ),
    "scalefree": PpoConfig(),
    "uniform-finetune": PpoConfig(
        lr_start=1e-4, lr_end=1e-5, epochs=5, minibatch=32, n_replicas=2048, n_sw=200,
        steps_per_update=25, n_eps=2, k_instances=64, n_train_reps=3, n_nmc_steps=50,
        beta_i=3.0, sa_sweeps=20000, success_threshold=1,
    ),
    "desk": PpoConfig(
        lr_start=1e-3, lr_end=1e-5, epochs=5, minibatch=32, n_replicas=128, n_sw=50,
        steps_per_update=10, n_eps=1, k_instances=8, n_train_reps=4, n_nmc_steps=20,
        sa_sweeps=1000,
    ),
    "smoke": PpoConfig(
        lr_start=1e-3, lr_end=1e-4, epochs=2, minibatch=8, n_replicas=16, n_sw=10,
        steps_per_update=4, n_eps=1, k_instances=2, n_train_reps=1, n_nmc_steps=4,
        sa_sweeps=100,
    ),
}


# ---------------------------------------------------------------------------
# Rewards and advantages
# ---------------------------------------------------------------------------


def compute_reward(e_new, e_best):
    """Improvement over the running best, or 0.  Returns ``(reward, new_best)``."""
    diff = e_new - e_best
    reward = np.where(diff > 0, 0.0, -diff) + 0.0
    return (float(reward) if np.ndim(reward) == 0 else reward), np.minimum(e_best, e_new)


@dataclass
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray


def gae(rewards, values, bootstrap, gamma: float, lam: float, dones=None) -> AdvantageEstimate:
    """Generalized advantage estimates along the last axis (time).

    ``dones[t]`` marks that the episode ended after step ``t``; no value
    flows back across it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.zeros_like(rewards) if dones is None else np.asarray(dones, dtype=np.float64)
    nxt = np.asarray(bootstrap, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        live = 1.0 - dones[..., t]
        delta = rewards[..., t] + gamma * nxt * live - values[..., t]
        running = delta + gamma * lam * live * running
        adv[..., t] = running
        nxt = values[..., t]
    return AdvantageEstimate(adv, adv + values)


# ---------------------------------------------------------------------------
# PPO objective
# ---------------------------------------------------------------------------


def clip_target(eps: float, adv):
    """``(1 + eps) A`` for positive ``A``, else ``(1 - eps) A``."""
    adv = np.asarray(adv, dtype=np.float64)
    return np.where(adv > 0, (1.0 + eps) * adv, (1.0 - eps) * adv)


def clipped_surrogate(ratio, adv, eps: float):
    return np.minimum(np.asarray(ratio) * adv, clip_target(eps, adv))


@dataclass
class Minibatch:
    """Rows of a rollout segment: arrays are ``(B, T)`` or ``(B, T, N)``."""

    state0: PolicyState
    inputs: list[PolicyInput]
    resets: np.ndarray      # (T, B)
    actions: np.ndarray     # (B, T, N) bool
    old_logp: np.ndarray
    old_values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_loss(outputs, batch: Minibatch, config: PpoConfig):
    """Loss value, gradients with respect to each step's ``p`` and ``value``, and diagnostics.

    ``outputs`` are the policy outputs over the segment under the current
    parameters.  Advantages are normalized over the minibatch.
    """
    eps = config.clip_eps
    adv = normalize(batch.advantages)
    count = adv.size
    p = np.stack([o.p for o in outputs], axis=1)
    v = np.stack([o.value for o in outputs], axis=1)
    logp = log_prob(p, batch.actions)
    ratio = np.exp(logp - batch.old_logp)
    if not np.all(np.isfinite(ratio)):
        bad = np.argwhere(~np.isfinite(ratio))[0]
        raise GradientError(f"non-finite probability ratio at row {bad[0]}, step {bad[1]}")
    unclipped = ratio * adv
    target = clip_target(eps, adv)
    surrogate = np.minimum(unclipped, target)
    policy_loss = -surrogate.mean()

    v_clip = batch.old_values + np.clip(v - batch.old_values, -eps, eps)
    err = (v - batch.returns) ** 2
    err_clip = (v_clip - batch.returns) ** 2
    value_loss = 0.5 * np.maximum(err, err_clip).mean()

    ent = entropy(p)
    loss = policy_loss + config.c_vf * value_loss - config.c_ent * ent.mean()

    d_logp = -np.where(unclipped < target, unclipped, 0.0) / count
    d_p = d_logp[..., None] * dlog_prob(p, batch.actions) - (config.c_ent / count) * dentropy(p)
    use_plain = err >= err_clip
    inside = np.abs(v - batch.old_values) < eps
    d_v = config.c_vf / count * np.where(use_plain, v - batch.returns,
                                         np.where(inside, v_clip - batch.returns, 0.0))
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(ent.mean()),
        "approx_kl": float(np.mean(batch.old_logp - logp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "max_ratio_dev": float(np.max(np.abs(ratio - 1.0))),
    }
    return float(loss), [d_p[:, t] for t in range(p.shape[1])], [d_v[:, t] for t in range(p.shape[1])], stats


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def linear_lr(config: PpoConfig, update: int, total: int) -> float:
    if total <= 1:
        return config.lr_start
    return config.lr_start + (config.lr_end - config.lr_start) * update / (total - 1)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    """One segment of ``T`` lockstep steps for ``R`` replicas."""

    state0: PolicyState
    inputs: list[PolicyInput] = field(default_factory=list)
    resets: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    logp: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    rewards: list[np.ndarray] = field(default_factory=list)
    dones: list[np.ndarray] = field(default_factory=list)

    def arrays(self):
        stack = lambda xs: np.stack(xs, axis=1)
        return (np.stack(self.actions, axis=1), stack(self.logp), stack(self.values),
                stack(self.rewards), stack(self.dones), np.stack(self.resets, axis=0))


class _Episodes:
    """Lockstep replicas on one instance with per-replica episode restarts."""

    def __init__(self, model: Model, config: PpoConfig, seed: int, key: tuple):
        self.model = model
        self.config = config
        self.nmc = config.nmc_config()
        self.sa_betas, self.jump_betas = nmc_phase_betas(config.schedule(), self.nmc)
        self.criterion = config.criterion()
        n = config.n_replicas
        self.init_rngs = [stream(seed, r, "init", *key) for r in range(n)]
        self.mc_rngs = [stream(seed, r, "mc", *key) for r in range(n)]
        self.bb_rngs = [stream(seed, r, "backbone", *key) for r in range(n)]
        self.act_rngs = [stream(seed, r, "action", *key) for r in range(n)]
        self.chains: list[ChainState] = [None] * n
        self.steps = np.zeros(n, dtype=np.int64)
        self.e_best = np.zeros(n)
        self.state = PolicyState.zeros(n, model.num_vars)
        self.pending_reset = np.ones(n, dtype=bool)
        for r in range(n):
            self._start(r)

    def _start(self, r: int) -> None:
        x0 = self.init_rngs[r].integers(0, 2, size=self.model.num_vars, dtype=np.int8)
        chain = ChainState(self.model, x0, self.mc_rngs[r], self.criterion)
        chain.sweep(self.sa_betas, self.config.rule)
        self.chains[r] = chain
        self.steps[r] = 0
        self.e_best[r] = chain.energy
        self.pending_reset[r] = True

    def observe(self) -> PolicyInput:
        bits = np.stack([c.x for c in self.chains])
        fields = np.stack([c.local_fields() for c in self.chains])
        betas = self.jump_betas[self.steps]
        return make_input(bits, fields, self.e_best, betas)

    def apply_resets(self) -> np.ndarray:
        resets = self.pending_reset.copy()
        self.state.h_local[resets] = 0.0
        self.state.h_global[resets] = 0.0
        self.pending_reset[:] = False
        return resets

    def step(self, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.config.n_replicas
        rewards = np.zeros(n)
        dones = np.zeros(n)
        for r in range(n):
            chain = self.chains[r]
            beta = float(self.jump_betas[self.steps[r]])
            nmc_jump(chain, masks[r], beta, self.nmc, self.bb_rngs[r], self.config.rule)
            rewards[r], self.e_best[r] = compute_reward(float(chain.energy), self.e_best[r])
            self.steps[r] += 1
            if chain.first_success is not None or self.steps[r] >= self.config.n_nmc_steps:
                dones[r] = 1.0
                self._start(r)
        return rewards, dones


def collect_segment(params: PolicyParams, episodes: _Episodes, graph, n_steps: int):
    """Run ``n_steps`` policy-driven steps and return the rollout and bootstrap values."""
    roll = Rollout(PolicyState(episodes.state.h_local.copy(), episodes.state.h_global.copy()))
    for _ in range(n_steps):
        resets = episodes.apply_resets()
        inp = episodes.observe()
        out = policy_forward(params, episodes.state, inp, graph)
        masks = np.stack([rng.random(out.p.shape[1]) < p for rng, p in zip(episodes.act_rngs, out.p)])
        roll.inputs.append(inp)
        roll.resets.append(resets)
        roll.actions.append(masks)
        roll.logp.append(log_prob(out.p, masks))
        roll.values.append(out.value)
        episodes.state = out.state
        rewards, dones = episodes.step(masks)
        roll.rewards.append(rewards)
        roll.dones.append(dones)
    # value of the next observation; zeroed by GAE wherever the episode ended
    peek = PolicyState(episodes.state.h_local.copy(), episodes.state.h_global.copy())
    peek.h_local[episodes.pending_reset] = 0.0
    peek.h_global[episodes.pending_reset] = 0.0
    bootstrap = policy_forward(params, peek, episodes.observe(), graph).value
    return roll, bootstrap


def _rows(roll: Rollout, rows: np.ndarray, actions, logp, values, adv, ret, resets) -> Minibatch:
    return Minibatch(
        state0=roll.state0.take(rows),
        inputs=[inp.take(rows) for inp in roll.inputs],
        resets=resets[:, rows],
        actions=actions[rows],
        old_logp=logp[rows],
        old_values=values[rows],
        advantages=adv[rows],
        returns=ret[rows],
    )


def ppo_update(params: PolicyParams, opt: Adam, roll: Rollout, bootstrap: np.ndarray, graph,
               config: PpoConfig, lr: float, rng: np.random.Generator) -> dict:
    """Epochs of shuffled minibatch steps over one segment; returns averaged diagnostics."""
    actions, logp, values, rewards, dones, resets = roll.arrays()
    est = gae(rewards, values, bootstrap, config.gamma, config.lam, dones)
    n = actions.shape[0]
    mb = min(config.minibatch, n)
    agg: dict[str, list] = {}
    first_ratio_dev = 0.0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            batch = _rows(roll, perm[start:start + mb], actions, logp, values, est.advantages, est.returns, resets)
            trace = segment_forward(params, batch.state0, batch.inputs, graph, batch.resets)
            loss, dps, dvs, stats = ppo_loss(trace.outputs, batch, config)
            if not np.isfinite(loss):
                raise GradientError(f"non-finite loss {loss}")
            if epoch == 0 and start == 0:
                first_ratio_dev = stats["max_ratio_dev"]
            grads = segment_backward(params, trace, graph, dps, dvs)
            grads, norm = clip_by_global_norm(grads, config.max_grad_norm)
            stats["grad_norm"] = norm
            opt.step(params, grads, lr)
            for k, v in stats.items():
                agg.setdefault(k, []).append(v)
    out = {k: float(np.mean(v)) for k, v in agg.items()}
    out["first_ratio_dev"] = first_ratio_dev
    out["mean_reward"] = float(rewards.mean())
    out["episodes_ended"] = int(dones.sum())
    return out


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _finite(params: PolicyParams) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())


def total_updates(config: PpoConfig, n_instances: int) -> int:
    return config.n_train_reps * n_instances * config.n_eps * config.updates_per_episode()


def train_rlnmc(instances: Sequence[Model], config: PpoConfig, seed: int = 0,
                init: Optional[PolicyParams] = None, log: Optional[Callable[[dict], None]] = None,
                checkpoint_dir: Optional[Path] = None, checkpoint_every: int = 0):
    """Train a policy; returns ``(params, log_records)``.

    Loops ``n_train_reps`` passes over the instances, ``n_eps`` episodes per
    instance, ``n_nmc_steps`` lockstep steps per episode.  Raises
    :class:`TrainingError` carrying the last finite parameters on divergence.
    """
    params = init_params(seed) if init is None else {k: np.array(v, dtype=np.float64) for k, v in init.items()}
    records: list[dict] = []
    total = total_updates(config, len(instances))
    if total == 0:
        return params, records
    opt = Adam(params)
    shuffle = stream(seed, 0, "shuffle")
    graphs = [build_factor_graph(m) for m in instances]
    good = {k: v.copy() for k, v in params.items()}
    update = 0
    for rep in range(config.n_train_reps):
        for inst in range(len(instances)):
            for ep in range(config.n_eps):
                # every pass replays the same episode streams, so passes differ only through the policy
                episodes = _Episodes(instances[inst], config, seed, (inst, ep))
                left = config.n_nmc_steps
                while left > 0:
                    n_steps = min(config.steps_per_update, left)
                    left -= n_steps
                    roll, boot = collect_segment(params, episodes, graphs[inst], n_steps)
                    if left == 0:
                        roll.dones[-1][:] = 1.0
                    lr = linear_lr(config, update, total)
                    try:
                        stats = ppo_update(params, opt, roll, boot, graphs[inst], config, lr, shuffle)
                    except (GradientError, FloatingPointError) as exc:
                        raise TrainingError(f"update {update}: {exc}", good, update) from exc
                    if not _finite(params):
                        raise TrainingError(f"update {update}: non-finite parameters", good, update)
                    good = {k: v.copy() for k, v in params.items()}
                    rec = {"update": update, "rep": rep, "instance": inst, "episode": ep, "lr": lr, **stats}
                    records.append(rec)
                    if log is not None:
                        log(rec)
                    update += 1
                    if checkpoint_dir is not None and checkpoint_every and update % checkpoint_every == 0:
                        save_params(params, Path(checkpoint_dir) / f"policy_{update:06d}.ckpt")
    return params, records


def reward_quarters(records: Sequence[dict]) -> tuple[float, float]:
    """Mean ``mean_reward`` over the first and the last quarter of updates."""
    r = np.array([rec["mean_reward"] for rec in records])
    q = max(1, len(r) // 4)
    return float(r[:q].mean()), float(r[-q:].mean())
