"""Compiled inner loops for clause-cache bookkeeping and single-flip sweeps.

Every factor is stored as a weighted clause: it contributes its weight to the
energy iff none of its literals is true.  A literal on variable ``j`` with
negation flag ``neg`` is true iff ``x[j] != neg``.  The cache per factor is the
number of true literals; ``delta[j]`` is the exact energy change of flipping
``j`` (twice the local field).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _contrib(lit_true, count, w):
    if lit_true:
        if count == 1:
            return w
        return w - w
    if count == 0:
        return -w
    return w - w


@njit(cache=True)
def init_cache(x, cl_ptr, cl_var, cl_neg, weight, tcount, delta):
    """Fill ``tcount`` and ``delta`` from scratch; return the factor energy."""
    n_fac = cl_ptr.shape[0] - 1
    delta[:] = 0
    energy = np.zeros(1, weight.dtype)[0]
    for a in range(n_fac):
        c = 0
        for q in range(cl_ptr[a], cl_ptr[a + 1]):
            if x[cl_var[q]] != cl_neg[q]:
                c += 1
        tcount[a] = c
        w = weight[a]
        if c == 0:
            energy += w
        for q in range(cl_ptr[a], cl_ptr[a + 1]):
            j = cl_var[q]
            delta[j] += _contrib(x[j] != cl_neg[q], c, w)
    return energy


@njit(cache=True)
def flip(i, x, tcount, delta, cl_ptr, cl_var, cl_neg, weight, v_ptr, v_cl, v_lit):
    """Flip variable ``i`` updating incident caches; return the energy change."""
    d_e = delta[i]
    xi = x[i]
    for p in range(v_ptr[i], v_ptr[i + 1]):
        a = v_cl[p]
        was_true = xi != cl_neg[v_lit[p]]
        c = tcount[a]
        c_new = c - 1 if was_true else c + 1
        tcount[a] = c_new
        if c >= 2 and c_new >= 2:
            continue  # no literal's make/break status changes
        w = weight[a]
        for q in range(cl_ptr[a], cl_ptr[a + 1]):
            j = cl_var[q]
            if j == i:
                delta[j] += _contrib(not was_true, c_new, w) - _contrib(was_true, c, w)
            else:
                t = x[j] != cl_neg[q]
                delta[j] += _contrib(t, c_new, w) - _contrib(t, c, w)
    x[i] = 1 - xi
    return d_e


@njit(cache=True)
def assign(idx, values, x, tcount, delta, cl_ptr, cl_var, cl_neg, weight, v_ptr, v_cl, v_lit):
    """Set ``x[idx] = values`` (one simultaneous move); return the energy change."""
    total = np.zeros(1, delta.dtype)[0]
    for t in range(idx.shape[0]):
        i = idx[t]
        if x[i] != values[t]:
            total += flip(i, x, tcount, delta, cl_ptr, cl_var, cl_neg, weight, v_ptr, v_cl, v_lit)
    return total


@njit(cache=True)
def run_sweeps(
    x, tcount, delta, energy,
    cl_ptr, cl_var, cl_neg, weight, v_ptr, v_cl, v_lit,
    betas, uniforms, frozen, gibbs, target, sweep0,
    best_x, best, trace_e, trace_best, trace_x, record_states,
):
    """Sequential-order single-flip sweeps, one per entry of ``betas``.

    ``best`` holds ``[best_energy, best_sweep, first_success]`` and is updated
    after every accepted flip.  Sweep ``s`` of the block is labelled
    ``sweep0 + s + 1``.  Returns the final energy.

    ``best_x`` is copied lazily: only when the chain is about to leave a new
    best state by a non-improving flip, or at the end of the block.
    """
    n = x.shape[0]
    at_best = False
    for s in range(betas.shape[0]):
        label = sweep0 + s + 1
        beta = betas[s]
        for i in range(n):
            if frozen[i]:
                continue
            d = delta[i]
            u = uniforms[s, i]
            if gibbs:
                z = beta * d
                if z > 700.0:
                    accept = False
                else:
                    accept = u * (1.0 + math.exp(z)) < 1.0
            else:
                accept = d <= 0 or u < math.exp(-beta * d)
            if accept:
                if at_best and d >= 0:
                    best_x[:] = x
                    at_best = False
                energy += flip(i, x, tcount, delta, cl_ptr, cl_var, cl_neg, weight, v_ptr, v_cl, v_lit)
                if energy < best[0]:
                    best[0] = energy
                    best[1] = label
                    at_best = True
                if best[2] < 0 and energy <= target:
                    best[2] = label
        trace_e[s] = energy
        trace_best[s] = best[0]
        if record_states:
            trace_x[s, :] = x
    if at_best:
        best_x[:] = x
    return energy


@njit(cache=True)
def factor_energies(x, cl_ptr, cl_var, cl_neg, weight):
    """Energy contribution of each factor, computed independently of any cache."""
    n_fac = cl_ptr.shape[0] - 1
    out = np.zeros(n_fac, dtype=weight.dtype)
    for a in range(n_fac):
        sat = False
        for q in range(cl_ptr[a], cl_ptr[a + 1]):
            if x[cl_var[q]] != cl_neg[q]:
                sat = True
                break
        if not sat:
            out[a] = weight[a]
    return out


@njit(cache=True)
def batch_energies(xs, cl_ptr, cl_var, cl_neg, weight):
    """Total factor energy of every row of ``xs``."""
    out = np.zeros(xs.shape[0], dtype=weight.dtype)
    for r in range(xs.shape[0]):
        out[r] = factor_energies(xs[r], cl_ptr, cl_var, cl_neg, weight).sum()
    return out
