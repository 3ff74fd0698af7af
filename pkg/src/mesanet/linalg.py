"""Dense helpers shared by every layer: activations, norms, causal conv, rng."""

from __future__ import annotations

import zlib

import numpy as np

NORM_GUARD = 1e-12
RMS_EPS = 1e-6
SOFTCAP = 30.0


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what}: non-finite input")


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale ``v`` to unit L2 norm along ``axis``.

    Vectors whose norm is at most ``NORM_GUARD`` are returned unchanged.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[axis] < 1:
        raise ValueError("l2_normalize: empty vector")
    _check_finite(v, "l2_normalize")
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    safe = np.where(norm > NORM_GUARD, norm, 1.0)
    return v / safe


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = np.asarray(x, dtype=float)
    return x * sigmoid(x)


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def rms_norm(v: np.ndarray, weight: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """RMSNorm over the last axis: ``v * weight / sqrt(mean(v**2) + eps)``."""
    v = np.asarray(v, dtype=float)
    weight = np.asarray(weight, dtype=float)
    if weight.shape[-1] != v.shape[-1]:
        raise ValueError(f"rms_norm: length mismatch {v.shape[-1]} vs {weight.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    return v * inv * weight


def causal_conv4(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Causal width-4 convolution along the time axis (``-2``).

    ``y[t] = sum_i b[i] * x[t - i]`` for ``i = 0..3`` with zero padding before
    the first step. ``b`` has a trailing axis of length 4; its leading axes
    broadcast against the leading (non time, non channel) axes of ``x``.
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError("causal_conv4: need at least one timestep")
    if b.shape[-1] != 4:
        raise ValueError("causal_conv4: kernel must have 4 taps")
    T = x.shape[-2]
    y = np.zeros(np.broadcast_shapes(x.shape, b.shape[:-1] + (1, 1)))
    for i in range(4):
        if i >= T:
            break
        tap = b[..., i][..., None, None]
        y[..., i:, :] += tap * x[..., : T - i, :]
    return y


def logit_softcap(logits, c: float = SOFTCAP):
    if c <= 0:
        raise ValueError("logit_softcap: cap must be positive")
    return c * np.tanh(np.asarray(logits, dtype=float) / c)


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """PCG64 generator for a named sub-stream of ``seed``.

    Stream names are hashed with CRC32 so the mapping is stable across runs
    and platforms.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if stream:
        key.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
