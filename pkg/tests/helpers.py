"""Independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np

from rlnmc.anneal import Trace, init_chain
from rlnmc.problem import CnfFormula


def unsat_counts(f: CnfFormula) -> np.ndarray:
    """Unsat-clause count of every assignment; index bit ``i`` is ``x_i``."""
    n = f.num_vars
    idx = np.arange(1 << n, dtype=np.int64)
    e = np.zeros(1 << n, dtype=np.int64)
    for c in f.clauses:
        sat = np.zeros(1 << n, dtype=bool)
        for v, neg in zip(c.variables, c.negated):
            bit = ((idx >> v) & 1).astype(bool)
            sat |= ~bit if neg else bit
        e += ~sat
    return e


def exhaustive_minimum(f: CnfFormula) -> int:
    return int(unsat_counts(f).min())


def boltzmann_tv(f: CnfFormula, beta: float, n_sweeps: int, rule: str, seed: int = 0, block: int = 50_000) -> float:
    """Total-variation distance between visited-state frequencies and the exact Boltzmann law."""
    n = f.num_vars
    e = unsat_counts(f).astype(np.float64)
    w = np.exp(-beta * (e - e.min()))
    exact = w / w.sum()
    chain = init_chain(f, seed, 0)
    chain.sweep(np.full(100, beta), rule)
    counts = np.zeros(1 << n)
    weights = 1 << np.arange(n)
    done = 0
    while done < n_sweeps:
        m = min(block, n_sweeps - done)
        tr = Trace(states=True)
        chain.sweep(np.full(m, beta), rule, trace=tr)
        counts += np.bincount(tr.assignments.astype(np.int64) @ weights, minlength=1 << n)
        done += m
    emp = counts / counts.sum()
    return 0.5 * float(np.abs(emp - exact).sum())


def all_assignments(n: int) -> np.ndarray:
    return np.array(list(itertools.product([0, 1], repeat=n)), dtype=np.int8)


# ---------------------------------------------------------------------------
# Policy gradient check
# ---------------------------------------------------------------------------


def random_policy_setup(seed: int, n: int = 6, n_factors: int = 4, n_rep: int = 2, n_steps: int = 3):
    """Random graph, perturbed params, inputs, actions and a mid-segment reset."""
    from rlnmc.generate import GeneratorSpec, generate
    from rlnmc.policy import PolicyInput, PolicyState, init_params
    from rlnmc.problem import build_factor_graph

    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    graph = build_factor_graph(generate(GeneratorSpec(n=n, k=k, m=n_factors, seed=seed)))
    params = init_params(seed)
    for name in params:
        params[name] = params[name] + 0.3 * rng.standard_normal(params[name].shape)
    inputs = [PolicyInput(rng.integers(0, 2, (n_rep, n)).astype(float), rng.uniform(0, 3, (n_rep, n)),
                          rng.normal(size=n_rep), rng.uniform(0.1, 0.5, n_rep)) for _ in range(n_steps)]
    actions = [rng.random((n_rep, n)) < 0.5 for _ in range(n_steps)]
    weights = rng.normal(size=(n_steps, n_rep))
    resets = np.zeros((n_steps, n_rep), bool)
    resets[rng.integers(1, n_steps), rng.integers(n_rep)] = True
    state = PolicyState(0.3 * rng.standard_normal((n_rep, n, 16)), 0.3 * rng.standard_normal((n_rep, 8)))
    return params, state, inputs, graph, actions, weights, resets


def _surrogate_loss(actions, weights):
    from rlnmc.policy import dentropy, dlog_prob, entropy, log_prob

    def loss(outs):
        total, dps, dvs = 0.0, [], []
        for t, o in enumerate(outs):
            w = weights[t]
            total += float(np.sum(w * log_prob(o.p, actions[t])) + 0.5 * np.sum(o.value ** 2)
                           + 0.1 * np.sum(entropy(o.p)))
            dps.append(w[:, None] * dlog_prob(o.p, actions[t]) + 0.1 * dentropy(o.p))
            dvs.append(o.value.copy())
        return total, dps, dvs, None

    return loss


def gradient_check_error(params, state, inputs, graph, actions, weights, resets,
                         per_block: int = 8, h: float = 1e-5, seed: int = 0) -> float:
    """Worst per-block relative error between analytic and central-difference gradients."""
    from rlnmc.policy import policy_gradient

    loss = _surrogate_loss(actions, weights)
    _, grads, _ = policy_gradient(params, state, inputs, graph, loss, resets)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, min(per_block, flat.size), replace=False)
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = policy_gradient(params, state, inputs, graph, loss, resets)[0]
            flat[i] = old - h
            lm = policy_gradient(params, state, inputs, graph, loss, resets)[0]
            flat[i] = old
            fd[j] = (lp - lm) / (2 * h)
        an = grads[name].reshape(-1)[idx]
        scale = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-4)
        worst = max(worst, float(np.linalg.norm(an - fd) / scale))
    return worst
