"""Recurrent factor-graph policy that proposes backbone masks.

Pipeline per step, batched over replicas ``R``:

1. local GRU per variable on ``[x_i, |H_i|]`` (hidden 16)
2. self-attention inside every factor on the new local hiddens
3. node embedding = mean of the factor outputs over incident factors
4. global GRU on ``[e, T, mean_i y_i]`` (hidden 8)
5. MLP 24 -> 8 -> 1 on ``[y_i, global hidden]`` -> Bernoulli probability
6. linear 8 -> 1 value head on the global hidden

Gradients are computed by a hand-written reverse pass over whole segments
of steps (truncated at the segment start).

GRU convention::

    z = sig(x Wz + h Uz + bz)     r = sig(x Wr + h Ur + br)
    n = tanh(x Wh + (r*h) Uh + bh)
    h' = (1 - z) * h + z * n
"""

from __future__ import annotations

import io
import math
import struct
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ._attention import attention_backward, attention_forward
from .problem import FactorGraph, Model, build_factor_graph
from .rng import stream

LOCAL_HIDDEN = 16
GLOBAL_HIDDEN = 8
MLP_HIDDEN = 8
P_CLAMP = 1e-6


def _gru_shapes(prefix: str, n_in: int, n_h: int) -> dict:
    out = {}
    for g in "zrh":
        out[f"{prefix}_W{g}"] = (n_in, n_h)
        out[f"{prefix}_U{g}"] = (n_h, n_h)
        out[f"{prefix}_b{g}"] = (n_h,)
    return out


PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    **_gru_shapes("lg", 2, LOCAL_HIDDEN),
    "att_Wq": (LOCAL_HIDDEN, LOCAL_HIDDEN),
    "att_Wk": (LOCAL_HIDDEN, LOCAL_HIDDEN),
    "att_Wv": (LOCAL_HIDDEN, LOCAL_HIDDEN),
    **_gru_shapes("gg", 2 + LOCAL_HIDDEN, GLOBAL_HIDDEN),
    "mlp_W1": (LOCAL_HIDDEN + GLOBAL_HIDDEN, MLP_HIDDEN),
    "mlp_b1": (MLP_HIDDEN,),
    "mlp_W2": (MLP_HIDDEN, 1),
    "mlp_b2": (1,),
    "val_W": (GLOBAL_HIDDEN, 1),
    "val_b": (1,),
}

PolicyParams = dict  # name -> float64 array, keys and shapes as in PARAM_SHAPES


class ShapeError(ValueError):
    pass


class GradientError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def param_count() -> int:
    return sum(int(np.prod(s)) for s in PARAM_SHAPES.values())


def init_params(seed: int) -> PolicyParams:
    """Uniform ``[-a, a]`` weights with ``a = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    rng = stream(seed, 0, "params")
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def zeros_like_params(params: Optional[PolicyParams] = None) -> PolicyParams:
    return {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}


def check_params(params: PolicyParams) -> None:
    for name, shape in PARAM_SHAPES.items():
        if name not in params:
            raise ShapeError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected {shape}, found {params[name].shape}")


# ---------------------------------------------------------------------------
# Inputs / outputs
# ---------------------------------------------------------------------------


@dataclass
class PolicyState:
    h_local: np.ndarray   # (R, N, 16)
    h_global: np.ndarray  # (R, 8)

    @classmethod
    def zeros(cls, n_replicas: int, n_vars: int) -> "PolicyState":
        return cls(np.zeros((n_replicas, n_vars, LOCAL_HIDDEN)), np.zeros((n_replicas, GLOBAL_HIDDEN)))

    def take(self, rows) -> "PolicyState":
        return PolicyState(self.h_local[rows].copy(), self.h_global[rows].copy())


@dataclass
class PolicyInput:
    bits: np.ndarray        # (R, N) local-minimum states
    abs_fields: np.ndarray  # (R, N) |H_i|
    energy: np.ndarray      # (R,) best energy so far, already divided by energy_scale
    temperature: np.ndarray  # (R,)

    def take(self, rows) -> "PolicyInput":
        return PolicyInput(self.bits[rows], self.abs_fields[rows], self.energy[rows], self.temperature[rows])


def energy_scale(n_vars: int) -> float:
    return n_vars / 50.0


def make_input(bits, fields, best_energy, beta) -> PolicyInput:
    """Batch inputs from raw chain quantities (fields in energy units)."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.float64))
    n = bits.shape[1]
    r = bits.shape[0]
    return PolicyInput(
        bits,
        np.abs(np.atleast_2d(np.asarray(fields, dtype=np.float64))),
        np.broadcast_to(np.asarray(best_energy, dtype=np.float64) / energy_scale(n), (r,)).copy(),
        np.broadcast_to(1.0 / np.asarray(beta, dtype=np.float64), (r,)).copy(),
    )


@dataclass
class PolicyOutput:
    p: np.ndarray      # (R, N)
    value: np.ndarray  # (R,)
    state: PolicyState


# ---------------------------------------------------------------------------
# Factor attention index
# ---------------------------------------------------------------------------


class AttentionIndex:
    """CSR factor membership, attention-block offsets and inverse degrees."""

    def __init__(self, graph: FactorGraph):
        n = graph.num_vars
        widths = np.array([len(f) for f in graph.factors], dtype=np.int64)
        self.fac_ptr = np.concatenate(([0], np.cumsum(widths))).astype(np.int64)
        self.sq_ptr = np.concatenate(([0], np.cumsum(widths * widths))).astype(np.int64)
        self.fac_var = (np.concatenate([np.asarray(f, dtype=np.int64) for f in graph.factors])
                        if graph.factors else np.zeros(0, np.int64))
        deg = np.bincount(self.fac_var, minlength=n).astype(np.float64)
        self.inv_deg = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
        self.n_vars = n
        self.n_alpha = int(self.sq_ptr[-1])

    @property
    def arrays(self):
        return self.fac_ptr, self.fac_var, self.sq_ptr, self.inv_deg


_INDEX_CACHE: "weakref.WeakKeyDictionary[FactorGraph, AttentionIndex]" = weakref.WeakKeyDictionary()


def attention_index(graph: FactorGraph) -> AttentionIndex:
    idx = _INDEX_CACHE.get(graph)
    if idx is None:
        idx = _INDEX_CACHE[graph] = AttentionIndex(graph)
    return idx


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------


def _sig(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _mm(a, w):
    return a @ w


def _acc_outer(g, a, d):
    """``g += sum over leading dims of a^T d``."""
    g += a.reshape(-1, a.shape[-1]).T @ d.reshape(-1, d.shape[-1])


def _gru_fwd(P, pre, x, h):
    z = _sig(_mm(x, P[pre + "_Wz"]) + _mm(h, P[pre + "_Uz"]) + P[pre + "_bz"])
    r = _sig(_mm(x, P[pre + "_Wr"]) + _mm(h, P[pre + "_Ur"]) + P[pre + "_br"])
    rh = r * h
    n = np.tanh(_mm(x, P[pre + "_Wh"]) + _mm(rh, P[pre + "_Uh"]) + P[pre + "_bh"])
    h1 = (1.0 - z) * h + z * n
    return h1, (x, h, z, r, n, rh)


def _gru_bwd(P, G, pre, dh1, cache):
    x, h, z, r, n, rh = cache
    lead = tuple(range(dh1.ndim - 1))
    dz = dh1 * (n - h)
    dn = dh1 * z
    dh = dh1 * (1.0 - z)
    dan = dn * (1.0 - n * n)
    _acc_outer(G[pre + "_Wh"], x, dan)
    _acc_outer(G[pre + "_Uh"], rh, dan)
    G[pre + "_bh"] += dan.sum(axis=lead)
    drh = dan @ P[pre + "_Uh"].T
    dr = drh * h
    dh += drh * r
    dx = dan @ P[pre + "_Wh"].T
    daz = dz * z * (1.0 - z)
    _acc_outer(G[pre + "_Wz"], x, daz)
    _acc_outer(G[pre + "_Uz"], h, daz)
    G[pre + "_bz"] += daz.sum(axis=lead)
    dh += daz @ P[pre + "_Uz"].T
    dx += daz @ P[pre + "_Wz"].T
    dar = dr * r * (1.0 - r)
    _acc_outer(G[pre + "_Wr"], x, dar)
    _acc_outer(G[pre + "_Ur"], h, dar)
    G[pre + "_br"] += dar.sum(axis=lead)
    dh += dar @ P[pre + "_Ur"].T
    dx += dar @ P[pre + "_Wr"].T
    return dx, dh


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------


def _check_shapes(state: PolicyState, inp: PolicyInput, n: int):
    r = inp.bits.shape[0]
    if inp.bits.shape != (r, n) or inp.abs_fields.shape != (r, n):
        raise ShapeError(f"inputs must have shape (R, {n}), got {inp.bits.shape} and {inp.abs_fields.shape}")
    if inp.energy.shape != (r,) or inp.temperature.shape != (r,):
        raise ShapeError("global inputs must have shape (R,)")
    if state.h_local.shape != (r, n, LOCAL_HIDDEN) or state.h_global.shape != (r, GLOBAL_HIDDEN):
        raise ShapeError(f"state shapes {state.h_local.shape}, {state.h_global.shape} do not match R={r}, N={n}")


def _step_fwd(P, index: AttentionIndex, hl, hg, inp: PolicyInput):
    R, N = inp.bits.shape
    xl = np.stack([inp.bits, inp.abs_fields], axis=-1)
    hl1, c_lg = _gru_fwd(P, "lg", xl, hl)
    q = hl1 @ P["att_Wq"]
    k = hl1 @ P["att_Wk"]
    v = hl1 @ P["att_Wv"]
    y = np.zeros((R, N, LOCAL_HIDDEN))
    alpha = np.empty((R, index.n_alpha))
    attention_forward(q, k, v, *index.arrays[:3], index.inv_deg, y, alpha)
    att = (q, k, v, alpha)
    pooled = y.mean(axis=1) if N else np.zeros((R, LOCAL_HIDDEN))
    xg = np.concatenate([inp.energy[:, None], inp.temperature[:, None], pooled], axis=1)
    hg1, c_gg = _gru_fwd(P, "gg", xg, hg)
    zin = np.concatenate([y, np.broadcast_to(hg1[:, None, :], (R, N, GLOBAL_HIDDEN))], axis=-1)
    a1 = np.tanh(zin @ P["mlp_W1"] + P["mlp_b1"])
    logit = (a1 @ P["mlp_W2"])[..., 0] + P["mlp_b2"][0]
    p_raw = _sig(logit)
    p = np.clip(p_raw, P_CLAMP, 1.0 - P_CLAMP)
    value = (hg1 @ P["val_W"])[:, 0] + P["val_b"][0]
    cache = (c_lg, hl1, att, y, c_gg, hg1, zin, a1, p_raw, N)
    return p, value, hl1, hg1, cache


def _step_bwd(P, G, index: AttentionIndex, cache, dp, dv, dhl1, dhg1):
    c_lg, hl1, att, y, c_gg, hg1, zin, a1, p_raw, N = cache
    R = hl1.shape[0]
    G["val_W"] += hg1.T @ dv[:, None]
    G["val_b"] += dv.sum(keepdims=True)
    dhg1 = dhg1 + dv[:, None] * P["val_W"][:, 0]
    inside = (p_raw >= P_CLAMP) & (p_raw <= 1.0 - P_CLAMP)
    dlogit = np.where(inside, dp, 0.0) * p_raw * (1.0 - p_raw)
    G["mlp_b2"] += dlogit.sum(keepdims=True).reshape(1)
    _acc_outer(G["mlp_W2"], a1, dlogit[..., None])
    dz1 = dlogit[..., None] * P["mlp_W2"][:, 0] * (1.0 - a1 * a1)
    _acc_outer(G["mlp_W1"], zin, dz1)
    G["mlp_b1"] += dz1.sum(axis=(0, 1))
    dzin = dz1 @ P["mlp_W1"].T
    dy = dzin[..., :LOCAL_HIDDEN].copy()
    dhg1 = dhg1 + dzin[..., LOCAL_HIDDEN:].sum(axis=1)
    dxg, dhg = _gru_bwd(P, G, "gg", dhg1, c_gg)
    if N:
        dy += dxg[:, None, 2:] / N
    q, k, v, alpha = att
    dq = np.zeros_like(hl1)
    dk = np.zeros_like(hl1)
    dvv = np.zeros_like(hl1)
    attention_backward(dy, q, k, v, *index.arrays[:3], index.inv_deg, alpha, dq, dk, dvv)
    _acc_outer(G["att_Wq"], hl1, dq)
    _acc_outer(G["att_Wk"], hl1, dk)
    _acc_outer(G["att_Wv"], hl1, dvv)
    dhl1 = dhl1 + dq @ P["att_Wq"].T + dk @ P["att_Wk"].T + dvv @ P["att_Wv"].T
    _, dhl = _gru_bwd(P, G, "lg", dhl1, c_lg)
    return dhl, dhg


def policy_forward(params: PolicyParams, state: PolicyState, inp: PolicyInput, graph: FactorGraph) -> PolicyOutput:
    """One deterministic step for a batch of replicas."""
    if graph.num_vars != inp.bits.shape[-1]:
        raise ShapeError(f"graph has N={graph.num_vars}, inputs have N={inp.bits.shape[-1]}")
    _check_shapes(state, inp, graph.num_vars)
    p, v, hl1, hg1, _ = _step_fwd(params, attention_index(graph), state.h_local, state.h_global, inp)
    return PolicyOutput(p, v, PolicyState(hl1, hg1))


# ---------------------------------------------------------------------------
# Segments and gradients
# ---------------------------------------------------------------------------


@dataclass
class SegmentTrace:
    outputs: list[PolicyOutput]
    caches: list
    keeps: list


def segment_forward(params: PolicyParams, state0: PolicyState, inputs: Sequence[PolicyInput],
                    graph: FactorGraph, resets: Optional[np.ndarray] = None) -> SegmentTrace:
    """Forward over consecutive steps; ``resets[t, r]`` zeroes replica ``r``'s memory before step ``t``."""
    index = attention_index(graph)
    hl, hg = state0.h_local, state0.h_global
    outs, caches, keeps = [], [], []
    for t, inp in enumerate(inputs):
        _check_shapes(PolicyState(hl, hg), inp, graph.num_vars)
        keep = None
        if resets is not None and np.any(resets[t]):
            keep = (~np.asarray(resets[t], dtype=bool)).astype(np.float64)
            hl = hl * keep[:, None, None]
            hg = hg * keep[:, None]
        p, v, hl, hg, cache = _step_fwd(params, index, hl, hg, inp)
        outs.append(PolicyOutput(p, v, PolicyState(hl, hg)))
        caches.append(cache)
        keeps.append(keep)
    return SegmentTrace(outs, caches, keeps)


def segment_backward(params: PolicyParams, trace: SegmentTrace, graph: FactorGraph,
                     dps: Sequence[np.ndarray], dvs: Sequence[np.ndarray]) -> PolicyParams:
    """Reverse pass for upstream gradients on every step's ``p`` and ``value``."""
    index = attention_index(graph)
    grads = zeros_like_params()
    dhl = dhg = None
    for t in range(len(trace.caches) - 1, -1, -1):
        cache = trace.caches[t]
        R, N = cache[8].shape
        if dhl is None:
            dhl = np.zeros((R, N, LOCAL_HIDDEN))
            dhg = np.zeros((R, GLOBAL_HIDDEN))
        dhl, dhg = _step_bwd(params, grads, index, cache, dps[t], dvs[t], dhl, dhg)
        keep = trace.keeps[t]
        if keep is not None:
            dhl = dhl * keep[:, None, None]
            dhg = dhg * keep[:, None]
    return grads


LossFn = Callable[[list], tuple]


def policy_gradient(params: PolicyParams, state0: PolicyState, inputs: Sequence[PolicyInput],
                    graph: FactorGraph, loss_fn: LossFn, resets: Optional[np.ndarray] = None):
    """Exact gradient of ``loss_fn`` over a segment, truncated at its start.

    ``loss_fn(outputs)`` returns ``(loss, dps, dvs, extra)`` where ``dps[t]``
    and ``dvs[t]`` are derivatives with respect to step ``t``'s probabilities
    and values.  Returns ``(loss, grads, extra)``.
    """
    trace = segment_forward(params, state0, inputs, graph, resets)
    loss, dps, dvs, extra = loss_fn(trace.outputs)
    if not np.isfinite(loss):
        raise GradientError(f"non-finite loss {loss}")
    grads = segment_backward(params, trace, graph, dps, dvs)
    return loss, grads, extra


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


def log_prob(p: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Joint Bernoulli log-probability, summed over the last axis."""
    return np.sum(np.where(a, np.log(p), np.log1p(-p)), axis=-1)


def dlog_prob(p: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.where(a, 1.0 / p, -1.0 / (1.0 - p))


def entropy(p: np.ndarray) -> np.ndarray:
    return -np.sum(p * np.log(p) + (1.0 - p) * np.log1p(-p), axis=-1)


def dentropy(p: np.ndarray) -> np.ndarray:
    return np.log1p(-p) - np.log(p)


def sample_action(p: np.ndarray, rng: np.random.Generator):
    """Independent Bernoulli mask with its joint log-probability and entropy."""
    p = np.asarray(p)
    mask = rng.random(p.shape) < p
    return mask, float(log_prob(p, mask)), float(entropy(p))


# ---------------------------------------------------------------------------
# Inference-time backbone policy
# ---------------------------------------------------------------------------


class RLPolicy:
    """Stochastic backbone policy for :func:`rlnmc.nmc.run_nmc`.

    Keeps per-replica memories and the best energy seen at policy calls.
    """

    def __init__(self, params: PolicyParams):
        check_params(params)
        self.params = params
        self.mask_sizes: list[float] = []

    def reset(self, model: Model, replicas, seed):
        self.graph = build_factor_graph(model)
        self.state = PolicyState.zeros(len(replicas), model.num_vars)
        self.best = np.full(len(replicas), np.inf)
        self._rngs = [stream(seed, r, "action") for r in replicas]

    def masks(self, step, chains, beta):
        bits = np.stack([c.x for c in chains])
        fields = np.stack([c.local_fields() for c in chains])
        self.best = np.minimum(self.best, [float(c.energy) for c in chains])
        inp = make_input(bits, fields, self.best, beta)
        out = policy_forward(self.params, self.state, inp, self.graph)
        self.state = out.state
        masks = [rng.random(out.p.shape[1]) < out.p[i] for i, rng in enumerate(self._rngs)]
        self.mask_sizes.extend(float(m.mean()) for m in masks)
        return masks


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"RLNMCCKP"
CKPT_VERSION = 1


def _write_arrays(fh, arrays: dict) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_arrays(fh) -> dict:
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, ln).decode()
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if fh.read(1):
        raise CheckpointError("trailing bytes after last array")
    return out


def save_params(params: PolicyParams, path: Union[str, Path, io.IOBase]) -> None:
    check_params(params)
    ordered = {k: params[k] for k in PARAM_SHAPES}
    if isinstance(path, (str, Path)):
        with open(path, "wb") as fh:
            _write_arrays(fh, ordered)
    else:
        _write_arrays(path, ordered)


def load_params(path: Union[str, Path, io.IOBase]) -> PolicyParams:
    if isinstance(path, (str, Path)):
        with open(path, "rb") as fh:
            arrays = _read_arrays(fh)
    else:
        arrays = _read_arrays(path)
    problems = []
    for name, shape in PARAM_SHAPES.items():
        if name not in arrays:
            problems.append(f"{name}: expected {shape}, found nothing")
        elif arrays[name].shape != shape:
            problems.append(f"{name}: expected {shape}, found {arrays[name].shape}")
    for name in arrays.keys() - PARAM_SHAPES.keys():
        problems.append(f"{name}: unexpected array {arrays[name].shape}")
    if problems:
        raise CheckpointError("checkpoint does not match the policy: " + "; ".join(problems))
    if not all(np.all(np.isfinite(a)) for a in arrays.values()):
        raise CheckpointError("checkpoint holds non-finite values")
    return {k: arrays[k] for k in PARAM_SHAPES}
