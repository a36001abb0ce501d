"""Minimal numpy layers with hand-written backward passes.

Parameters live in plain ``dict[str, np.ndarray]`` (float64).  Every
forward function returns its output plus a cache; the matching backward
takes the cache and the upstream gradient and returns the input gradient,
accumulating parameter gradients into a ``grads`` dict.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailureError

Params = dict[str, np.ndarray]


def he_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


def dense(x, W, b):
    return x @ W.T + b, x


def dense_backward(dy, cache, W, grads, name):
    x = cache
    grads[name + ".W"] = grads.get(name + ".W", 0.0) + dy.T @ x
    grads[name + ".b"] = grads.get(name + ".b", 0.0) + dy.sum(axis=0)
    return dy @ W


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0.0)


def sigmoid(x):
    # split by sign for overflow safety
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k), (n, c, h, w, ho, wo)


def _col2im(dcols, meta, k, stride, pad):
    n, c, h, w, ho, wo = meta
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x, W, b, stride=2, pad=1):
    """``x`` is (N, C, H, W); ``W`` is (O, C, k, k)."""
    o, _, k, _ = W.shape
    cols, meta = _im2col(x, k, stride, pad)
    out = cols @ W.reshape(o, -1).T + b
    n, _, _, _, ho, wo = meta
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), (cols, meta, stride, pad)


def conv2d_backward(dy, cache, W, grads, name, need_input_grad=True):
    cols, meta, stride, pad = cache
    o, _, k, _ = W.shape
    dflat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    grads[name + ".W"] = grads.get(name + ".W", 0.0) + (dflat.T @ cols).reshape(W.shape)
    grads[name + ".b"] = grads.get(name + ".b", 0.0) + dflat.sum(axis=0)
    if not need_input_grad:
        return None
    return _col2im(dflat @ W.reshape(o, -1), meta, k, stride, pad)


def check_finite(*arrays, where: str = "forward pass") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailureError(f"non-finite value in {where}")


# ------------------------------------------------------------ param helpers


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten(vec: np.ndarray, like: Params) -> Params:
    out, i = {}, 0
    for k in sorted(like):
        n = like[k].size
        out[k] = vec[i:i + n].reshape(like[k].shape).copy()
        i += n
    return out


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Params, max_norm: float | None) -> Params:
    if not max_norm:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    b1, b2 = state.betas
    state.t += 1
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new[k] = p
            continue
        m = state.m.get(k, np.zeros_like(p)) * b1 + (1 - b1) * g
        v = state.v.get(k, np.zeros_like(p)) * b2 + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        new[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


# ------------------------------------------------------- siamese pair stream


def init_siamese(rng: np.random.Generator, prefix: str, in_dim: int, hidden: int, fusion: int) -> Params:
    """Two dense layers shared by both inputs, then a fusion layer over the concatenation."""
    return {
        f"{prefix}.s1.W": he_init(rng, hidden, in_dim),
        f"{prefix}.s1.b": np.zeros(hidden),
        f"{prefix}.s2.W": he_init(rng, hidden, hidden),
        f"{prefix}.s2.b": np.zeros(hidden),
        f"{prefix}.fuse.W": he_init(rng, fusion, 2 * hidden),
        f"{prefix}.fuse.b": np.zeros(fusion),
    }


def stream_forward(params: Params, prefix: str, x: np.ndarray):
    z1, c1 = dense(x, params[f"{prefix}.s1.W"], params[f"{prefix}.s1.b"])
    a1 = relu(z1)
    z2, c2 = dense(a1, params[f"{prefix}.s2.W"], params[f"{prefix}.s2.b"])
    return relu(z2), (c1, z1, c2, z2)


def stream_backward(params: Params, prefix: str, d_out, cache, grads) -> None:
    c1, z1, c2, z2 = cache
    d = relu_backward(d_out, z2)
    d = dense_backward(d, c2, params[f"{prefix}.s2.W"], grads, f"{prefix}.s2")
    d = relu_backward(d, z1)
    dense_backward(d, c1, params[f"{prefix}.s1.W"], grads, f"{prefix}.s1")


def siamese_forward(params: Params, prefix: str, current: np.ndarray, goal: np.ndarray):
    """Fused embedding of (current, goal); concatenation order is fixed."""
    e_cur, cache_cur = stream_forward(params, prefix, current)
    e_goal, cache_goal = stream_forward(params, prefix, goal)
    zf, cf = dense(np.concatenate([e_cur, e_goal], axis=1), params[f"{prefix}.fuse.W"], params[f"{prefix}.fuse.b"])
    return relu(zf), (cache_cur, cache_goal, cf, zf, e_cur.shape[1])


def siamese_backward(params: Params, prefix: str, d_fused, cache, grads) -> None:
    cache_cur, cache_goal, cf, zf, hidden = cache
    d = relu_backward(d_fused, zf)
    d_cat = dense_backward(d, cf, params[f"{prefix}.fuse.W"], grads, f"{prefix}.fuse")
    stream_backward(params, prefix, d_cat[:, :hidden], cache_cur, grads)
    stream_backward(params, prefix, d_cat[:, hidden:], cache_goal, grads)
