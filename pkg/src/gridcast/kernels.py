"""Dense float32 tensor kernels with seeded init and a gradient checker.

Activations are float32; reductions accumulate in float64 so that desk-
scale central-difference gradient checks hold at the stated tolerances.
Backward passes are provided only for the kernels that need them (layer
norm, bilinear sampling, softmax, linear maps, losses); everything else
is validated forward-only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

F32 = np.float32
LAYER_NORM_EPS = 1e-5


def derive_seed(seed: int, name: str) -> int:
    """Stable per-name child seed (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2s(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class SeededInit:
    """Deterministic tensor initializer: same (seed, scheme, shape) in,
    identical tensor out. Schemes: uniform_pm(scale), zeros, ones."""

    seed: int = 0
    scheme: str = "uniform_pm"
    scale: float = 0.1

    def create(self, shape) -> np.ndarray:
        if self.scheme == "zeros":
            return np.zeros(shape, F32)
        if self.scheme == "ones":
            return np.ones(shape, F32)
        if self.scheme == "uniform_pm":
            rng = np.random.default_rng(self.seed)
            return rng.uniform(-self.scale, self.scale, shape).astype(F32)
        raise ValueError(f"unknown init scheme {self.scheme!r}")


def seeded_uniform(seed: int, shape, scale: float = 0.1) -> np.ndarray:
    return SeededInit(seed, "uniform_pm", scale).create(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 matrix product with float64 accumulation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(F32)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction is mandatory)."""
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(F32)


def softmax_backward(y: np.ndarray, dout: np.ndarray, axis: int = -1) -> np.ndarray:
    """VJP of softmax given its output y."""
    y = np.asarray(y, dtype=np.float64)
    dout = np.asarray(dout, dtype=np.float64)
    dot = (dout * y).sum(axis=axis, keepdims=True)
    return (y * (dout - dot)).astype(F32)


def layer_norm64(x: np.ndarray) -> np.ndarray:
    """Float64 core of layer_norm_noaffine (no final cast)."""
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise ValueError("layer norm needs at least 2 channels")
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    return (x64 - mu) / np.sqrt(var + LAYER_NORM_EPS)


def layer_norm_noaffine(x: np.ndarray) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, no affine.

    eps = 1e-5 sits inside the square root. The output is canonicalized
    so exact zeros are +0.0.
    """
    return layer_norm64(x).astype(F32) + F32(0.0)


def layer_norm_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """VJP of layer_norm_noaffine w.r.t. its input."""
    x = np.asarray(x, dtype=np.float64)
    dout = np.asarray(dout, dtype=np.float64)
    c = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xc = x - mu
    xhat = xc * inv
    dmean = dout.mean(axis=-1, keepdims=True)
    dproj = (dout * xhat).mean(axis=-1, keepdims=True)
    return (inv * (dout - dmean - xhat * dproj)).astype(F32)


def bilinear_sample64(value_map: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Float64 core of bilinear_sample_2d (no final cast)."""
    m = np.asarray(value_map)
    if m.ndim == 2:
        m = m[..., None]
    h, w, c = m.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r, cl = pts[:, 0], pts[:, 1]
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(cl).astype(np.int64)
    wr = r - r0
    wc = cl - c0
    out = np.zeros((len(pts), c), np.float64)
    for dr, dc, weight in (
        (0, 0, (1 - wr) * (1 - wc)),
        (0, 1, (1 - wr) * wc),
        (1, 0, wr * (1 - wc)),
        (1, 1, wr * wc),
    ):
        ri, ci = r0 + dr, c0 + dc
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = m[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)].astype(np.float64)
        out += (weight * valid)[:, None] * vals
    return out


def bilinear_sample_2d(value_map: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample an (h, w, c) map at fractional (row, col) points, (n, 2).

    Bilinear interpolation with zero padding outside [0, h-1] x [0, w-1];
    integer coordinates reproduce exact map values.
    """
    return bilinear_sample64(value_map, points).astype(F32)


def bilinear_sample_2d_backward(map_shape, points: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """VJP of bilinear_sample_2d w.r.t. the value map (scatter-add)."""
    h, w = map_shape[0], map_shape[1]
    c = map_shape[2] if len(map_shape) > 2 else 1
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    dout = np.asarray(dout, dtype=np.float64).reshape(len(pts), c)
    grad = np.zeros((h, w, c), np.float64)
    r, cl = pts[:, 0], pts[:, 1]
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(cl).astype(np.int64)
    wr = r - r0
    wc = cl - c0
    for dr, dc, weight in (
        (0, 0, (1 - wr) * (1 - wc)),
        (0, 1, (1 - wr) * wc),
        (1, 0, wr * (1 - wc)),
        (1, 1, wr * wc),
    ):
        ri, ci = r0 + dr, c0 + dc
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        np.add.at(
            grad,
            (np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)),
            (weight * valid)[:, None] * dout,
        )
    out = grad.astype(F32)
    return out if len(map_shape) > 2 else out[..., 0]


def grad_check(f, x: np.ndarray, analytic_grad: np.ndarray, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per element: |g_a - g_n| / max(1e-4, |g_a| + |g_n|). The function is
    evaluated in float32; the effective (post-rounding) step is used as
    the divisor.
    """
    x = np.ascontiguousarray(x, dtype=F32)
    base = float(f(x))
    if not np.isfinite(base):
        raise ValueError("function value is not finite at x")
    a = np.asarray(analytic_grad, dtype=np.float64)
    if a.shape != x.shape:
        raise ValueError(f"analytic grad shape {a.shape} != input shape {x.shape}")
    num = np.zeros(x.size, np.float64)
    flat = x.reshape(-1)
    for i in range(x.size):
        orig = flat[i]
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] = np.float64(orig) + step
        xm[i] = np.float64(orig) - step
        fp = float(f(xp.reshape(x.shape)))
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value while perturbing element {i}")
        h_eff = np.float64(xp[i]) - np.float64(xm[i])
        num[i] = (fp - fm) / h_eff
    an = a.reshape(-1)
    rel = np.abs(an - num) / np.maximum(1e-4, np.abs(an) + np.abs(num))
    return float(rel.max())
