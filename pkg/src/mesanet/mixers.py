"""Sequence mixers expressed on the tape, plus a tape-free reference path.

Every recurrent mixer shares one feature pipeline per head: linear
projections, causal width-4 convolution, SiLU, and L2 normalization of
keys and queries. Gates are ``beta = sigmoid(x W_beta + b_beta)`` and

- standard mode: ``gamma = min(sigmoid(x W_gamma + b_gamma) * (1 - (1 - cap) beta^2), cap)``
- state-tracking mode: ``gamma = 2 sigmoid(x W_gamma + b_gamma) - 1`` (no cap)

Head outputs go through a per-head RMSNorm and are summed back into the
residual stream by ``W_o``. Activations are ``(batch, heads, time, dim)``
inside the mixer and ``(batch, time, n_e)`` at its boundary.
"""

from __future__ import annotations

import numpy as np

from . import baselines, linalg
from .autodiff import Tape, register
from .mesa import GAMMA_CAP, mesa_backward_chunked, mesa_forward_chunked

MIXER_KINDS = ("mesa",) + baselines.KINDS + ("softmax",)
CONV_STREAMS = ("q", "k", "v")


def mixer_param_shapes(kind: str, n_e: int, n_heads: int, n_a: int) -> dict[str, tuple]:
    if kind not in MIXER_KINDS:
        raise ValueError(f"unknown mixer kind {kind!r}")
    d = n_heads * n_a
    shapes = {"Wq": (n_e, d), "Wk": (n_e, d), "Wv": (n_e, d)}
    if kind != "softmax":
        for s in CONV_STREAMS:
            shapes[f"conv_{s}"] = (n_heads, 4)
        if kind not in ("mamba2",):
            shapes["Wbeta"] = (n_e, n_heads)
            shapes["bbeta"] = (n_heads,)
        if kind != "deltanet":
            shapes["Wgamma"] = (n_e, n_heads)
            shapes["bgamma"] = (n_heads,)
    if kind == "mesa":
        shapes["lam_raw"] = (n_heads, n_a)
    shapes["norm"] = (n_heads, n_a)
    shapes["Wo"] = (d, n_e)
    return shapes


# custom primitives


def _mesa_fwd(q, k, v, beta, gamma, lam, chunk, eps, k_max, init="diag"):
    O, saved = mesa_forward_chunked(q, k, v, beta, gamma, lam, chunk, eps, k_max, init)
    return O, saved


def _mesa_bwd(g, saved, q, k, v, beta, gamma, lam, chunk, eps, k_max, init="diag"):
    d = mesa_backward_chunked(saved, g)
    return d["q"], d["k"], d["v"], d["beta"], d["gamma"], d["lam"]


register("mesa", _mesa_fwd, _mesa_bwd)


def _rec_fwd(q, k, v, beta, gamma, kind):
    return baselines.recurrent_forward(kind, q, k, v, beta, gamma)


def _rec_bwd(g, saved, q, k, v, beta, gamma, kind):
    return baselines.recurrent_backward(saved, g, q, k, v, beta, gamma)


register("recurrent", _rec_fwd, _rec_bwd)


def _sm_fwd(q, k, v, scale):
    return baselines.softmax_forward(q, k, v, scale)


def _sm_bwd(g, P, q, k, v, scale):
    return baselines.softmax_backward(P, g, q, k, v, scale)


register("softmax_attn", _sm_fwd, _sm_bwd)


# tape graph


def _heads(tape: Tape, x: int, W: int, n_heads: int) -> int:
    B, T = tape.value(x).shape[:2]
    y = tape.matmul(x, W)
    y = tape.reshape(y, shape=(B, T, n_heads, -1))
    return tape.transpose(y, axes=(0, 2, 1, 3))


def _gate(tape: Tape, x: int, W: int, b: int) -> int:
    z = tape.add(tape.matmul(x, W), b)
    return tape.transpose(tape.sigmoid(z), axes=(0, 2, 1))


def mixer_graph(tape: Tape, x: int, p: dict[str, int], cfg) -> tuple[int, list[int]]:
    """Record one mixer on ``tape``. Returns ``(output node, mesa nodes)``.

    ``cfg`` needs ``mixer``, ``n_heads``, ``n_a``, ``mode``, ``chunk``,
    ``cg_eps``, ``cg_kmax``, ``cg_init`` and ``lam_floor``.
    """
    kind, nh = cfg.mixer, cfg.n_heads
    B, T, _ = tape.value(x).shape
    streams = {s: _heads(tape, x, p["W" + s], nh) for s in CONV_STREAMS}
    mesa_nodes: list[int] = []
    if kind == "softmax":
        out = tape.softmax_attn(streams["q"], streams["k"], streams["v"],
                                scale=1.0 / np.sqrt(cfg.n_a))
    else:
        for s in CONV_STREAMS:
            streams[s] = tape.silu(tape.conv4(streams[s], p[f"conv_{s}"]))
        q = tape.l2_normalize(streams["q"])
        k = tape.l2_normalize(streams["k"])
        v = streams["v"]
        ones = tape.const(np.ones((B, nh, T)))
        beta = _gate(tape, x, p["Wbeta"], p["bbeta"]) if "Wbeta" in p else ones
        if "Wgamma" not in p:
            gamma = ones
        else:
            sg = _gate(tape, x, p["Wgamma"], p["bgamma"])
            if cfg.mode == "state_tracking":
                gamma = tape.shift(tape.scale(sg, c=2.0), c=-1.0)
            elif "Wbeta" in p:
                cap = tape.shift(tape.scale(tape.mul(beta, beta), c=-(1.0 - GAMMA_CAP)), c=1.0)
                gamma = tape.clamp_max(tape.mul(sg, cap), c=GAMMA_CAP)
            else:
                gamma = tape.scale(sg, c=GAMMA_CAP)
        if kind == "mesa":
            lam = tape.shift(tape.softplus(p["lam_raw"]), c=cfg.lam_floor)
            out = tape.mesa(q, k, v, beta, gamma, lam, chunk=cfg.chunk, eps=cfg.cg_eps,
                            k_max=cfg.cg_kmax, init=cfg.cg_init)
            mesa_nodes.append(out)
        else:
            out = tape.recurrent(q, k, v, beta, gamma, kind=kind)
    w = tape.reshape(p["norm"], shape=(nh, 1, cfg.n_a))
    out = tape.rms_norm(out, w)
    out = tape.transpose(out, axes=(0, 2, 1, 3))
    out = tape.reshape(out, shape=(B, T, nh * cfg.n_a))
    return tape.matmul(out, p["Wo"]), mesa_nodes


# straight-line reference (no tape)


def realized_gates(x: np.ndarray, p: dict[str, np.ndarray], mode: str):
    """``(beta, gamma)`` as ``(batch, heads, time)`` arrays; ``None`` for absent gates."""
    beta = gamma = None
    if "Wbeta" in p:
        beta = np.swapaxes(linalg.sigmoid(x @ p["Wbeta"] + p["bbeta"]), -1, -2)
    if "Wgamma" in p:
        sg = np.swapaxes(linalg.sigmoid(x @ p["Wgamma"] + p["bgamma"]), -1, -2)
        if mode == "state_tracking":
            gamma = 2.0 * sg - 1.0
        elif beta is not None:
            gamma = np.minimum(sg * (1.0 - (1.0 - GAMMA_CAP) * beta * beta), GAMMA_CAP)
        else:
            gamma = GAMMA_CAP * sg
    return beta, gamma


def mesa_mixer_forward(x: np.ndarray, p: dict[str, np.ndarray], n_heads: int, mode: str = "standard",
                       lam_floor: float = 0.25, chunk: int = 64, eps: float = 1e-12,
                       k_max: int = 100, init: str = "diag") -> np.ndarray:
    """Mesa mixer on ``x`` of shape ``(batch, time, n_e)`` without the tape."""
    x = np.asarray(x, float)
    B, T, _ = x.shape
    n_a = p["lam_raw"].shape[-1]
    feats = {}
    for s in CONV_STREAMS:
        y = np.swapaxes((x @ p["W" + s]).reshape(B, T, n_heads, n_a), 1, 2)
        feats[s] = linalg.silu(linalg.causal_conv4(y, p[f"conv_{s}"]))
    q = linalg.l2_normalize(feats["q"])
    k = linalg.l2_normalize(feats["k"])
    beta, gamma = realized_gates(x, p, mode)
    lam = lam_floor + linalg.softplus(p["lam_raw"])
    O, _ = mesa_forward_chunked(q, k, feats["v"], beta, gamma, lam, chunk, eps, k_max, init)
    O = linalg.rms_norm(O, p["norm"][:, None, :])
    return np.swapaxes(O, 1, 2).reshape(B, T, n_heads * n_a) @ p["Wo"]


__all__ = ["MIXER_KINDS", "mixer_param_shapes", "mixer_graph", "mesa_mixer_forward",
           "realized_gates"]
