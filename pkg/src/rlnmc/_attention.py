"""Fused per-factor self-attention kernels (forward and reverse).

Factors are stored CSR-style: members of factor ``f`` are
``fac_var[fac_ptr[f]:fac_ptr[f + 1]]``.  Attention weights of factor ``f``
occupy ``alpha[:, sq_ptr[f]:sq_ptr[f + 1]]`` as a row-major ``w x w`` block.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath={"reassoc", "contract"})
def attention_forward(q, k, v, fac_ptr, fac_var, sq_ptr, inv_deg, y, alpha):
    """``y[r, i] = inv_deg[i] * sum over factors a of i of sum_j alpha_ij v[r, j]``."""
    n_rep, _, d = q.shape
    n_fac = len(fac_ptr) - 1
    wmax = 0
    for f in range(n_fac):
        wmax = max(wmax, fac_ptr[f + 1] - fac_ptr[f])
    tmp = np.empty(wmax)
    for r in range(n_rep):
        for f in range(n_fac):
            s = fac_ptr[f]
            w = fac_ptr[f + 1] - s
            ao = sq_ptr[f]
            for i in range(w):
                vi = fac_var[s + i]
                m = -np.inf
                for j in range(w):
                    vj = fac_var[s + j]
                    acc = 0.0
                    for c in range(d):
                        acc += q[r, vi, c] * k[r, vj, c]
                    tmp[j] = acc
                    if acc > m:
                        m = acc
                tot = 0.0
                for j in range(w):
                    tmp[j] = np.exp(tmp[j] - m)
                    tot += tmp[j]
                scale = inv_deg[vi]
                for j in range(w):
                    a = tmp[j] / tot
                    alpha[r, ao + i * w + j] = a
                    vj = fac_var[s + j]
                    for c in range(d):
                        y[r, vi, c] += scale * a * v[r, vj, c]


@njit(cache=True, fastmath={"reassoc", "contract"})
def attention_backward(dy, q, k, v, fac_ptr, fac_var, sq_ptr, inv_deg, alpha, dq, dk, dv):
    """Accumulate gradients of ``q``, ``k``, ``v`` given ``dy``."""
    n_rep, _, d = q.shape
    n_fac = len(fac_ptr) - 1
    wmax = 0
    for f in range(n_fac):
        wmax = max(wmax, fac_ptr[f + 1] - fac_ptr[f])
    da = np.empty(wmax)
    g = np.empty(d)
    for r in range(n_rep):
        for f in range(n_fac):
            s = fac_ptr[f]
            w = fac_ptr[f + 1] - s
            ao = sq_ptr[f]
            for i in range(w):
                vi = fac_var[s + i]
                for c in range(d):
                    g[c] = dy[r, vi, c] * inv_deg[vi]
                mean = 0.0
                for j in range(w):
                    vj = fac_var[s + j]
                    a = alpha[r, ao + i * w + j]
                    acc = 0.0
                    for c in range(d):
                        acc += g[c] * v[r, vj, c]
                        dv[r, vj, c] += a * g[c]
                    da[j] = acc
                    mean += a * acc
                for j in range(w):
                    vj = fac_var[s + j]
                    ds = alpha[r, ao + i * w + j] * (da[j] - mean)
                    for c in range(d):
                        dq[r, vi, c] += ds * k[r, vj, c]
                        dk[r, vj, c] += ds * q[r, vi, c]
