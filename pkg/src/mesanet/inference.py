"""Recurrent decoding with constant memory, plus CG diagnostics.

A :class:`DecodeSession` carries, per layer, the mixer state of every head
and the last three pre-convolution inputs of each stream. All arrays have a
leading batch axis so an evaluation set can be decoded in lock-step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg
from .cg import CGReport, NotPositiveDefiniteError, SpdOperator, batched_cg, estimate_condition
from .mixers import CONV_STREAMS, realized_gates
from .model import EMBED, ModelConfig

COND_STRIDE = 16
SWEEP_GRID = ((1e-2, 30), (1e-3, 30), (1e-4, 30), (1e-6, 30), (0.0, 30))
CSV_COLUMNS = ("layer", "head", "position", "cg_iters", "cond_estimate", "gamma_mean")


@dataclass
class LayerState:
    G: np.ndarray
    H: np.ndarray | None = None
    z: np.ndarray | None = None
    tails: dict = field(default_factory=dict)
    cache_k: list = field(default_factory=list)
    cache_v: list = field(default_factory=list)


class DecodeSession:
    """Step-by-step decoder for ``batch`` parallel sequences."""

    def __init__(self, cfg: ModelConfig, params: dict, batch: int = 1, eps: float | None = None,
                 k_max: int | None = None):
        self.cfg = cfg
        self.params = params
        self.batch = batch
        self.eps = cfg.cg_eps if eps is None else eps
        self.k_max = cfg.cg_kmax if k_max is None else k_max
        self.step_count = 0
        lead = (batch, cfg.n_heads)
        n = cfg.n_a
        self.layers = []
        for _ in range(cfg.n_layers):
            st = LayerState(np.zeros(lead + (n, n)))
            if cfg.mixer == "mesa":
                st.H = np.zeros(lead + (n, n))
            if cfg.mixer == "mlstm":
                st.z = np.zeros(lead + (n,))
            if cfg.mixer != "softmax":
                st.tails = {s: np.zeros((3,) + lead + (n,)) for s in CONV_STREAMS}
            self.layers.append(st)
        self.last_gammas: list = [None] * cfg.n_layers

    def state_nbytes(self) -> int:
        total = 0
        for st in self.layers:
            for a in (st.G, st.H, st.z):
                if a is not None:
                    total += a.nbytes
            total += sum(t.nbytes for t in st.tails.values())
            total += sum(a.nbytes for a in st.cache_k + st.cache_v)
        return total

    def lam(self, l: int) -> np.ndarray:
        return self.cfg.lam_floor + linalg.softplus(self.params[f"l{l}.mix.lam_raw"])


def _mixer_step(sess: DecodeSession, l: int, x: np.ndarray):
    """One mixer step on ``x`` of shape ``(batch, n_e)``; returns ``(out, reports)``."""
    cfg, P, st = sess.cfg, sess.params, sess.layers[l]
    pre = f"l{l}.mix."
    p = {k[len(pre):]: v for k, v in P.items() if k.startswith(pre)}
    B, nh, n = x.shape[0], cfg.n_heads, cfg.n_a
    feats = {s: (x @ p["W" + s]).reshape(B, nh, n) for s in CONV_STREAMS}
    reports: list = []
    if cfg.mixer == "softmax":
        st.cache_k.append(feats["k"])
        st.cache_v.append(feats["v"])
        K = np.stack(st.cache_k, axis=-2)
        V = np.stack(st.cache_v, axis=-2)
        a = np.einsum("bhtn,bhn->bht", K, feats["q"]) / np.sqrt(n)
        w = np.exp(a - a.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        o = np.einsum("bht,bhtn->bhn", w, V)
    else:
        for s in CONV_STREAMS:
            b = p[f"conv_{s}"]
            tail = st.tails[s]
            y = b[:, 0, None] * feats[s]
            for i in range(1, 4):
                y = y + b[:, i, None] * tail[i - 1]
            st.tails[s] = np.concatenate([feats[s][None], tail[:2]], axis=0)
            feats[s] = linalg.silu(y)
        q = linalg.l2_normalize(feats["q"])
        k = linalg.l2_normalize(feats["k"])
        v = feats["v"]
        beta, gamma = realized_gates(x[:, None, :], p, cfg.mode)
        beta = np.ones((B, nh)) if beta is None else beta[..., 0]
        gamma = np.ones((B, nh)) if gamma is None else gamma[..., 0]
        sess.last_gammas[l] = gamma
        bb, gg = beta[..., None, None], gamma[..., None, None]
        vk = v[..., :, None] * k[..., None, :]
        if cfg.mixer in ("deltanet", "gated_deltanet"):
            Gk = np.einsum("...ij,...j->...i", st.G, k)
            st.G = gg * (st.G - bb * Gk[..., :, None] * k[..., None, :]) + bb * vk
        else:
            st.G = gg * st.G + bb * vk
        if cfg.mixer == "mesa":
            st.H = gg * st.H + bb * (k[..., :, None] * k[..., None, :])
            lam = np.broadcast_to(sess.lam(l), (B, nh, n))
            H = st.H

            def apply(P_):
                return np.einsum("...ij,...j->...i", H, P_) + lam * P_

            diag = np.diagonal(H, axis1=-2, axis2=-1) + lam
            try:
                qs, it, rel, conv = batched_cg(apply, q, diag, sess.eps, sess.k_max, cfg.cg_init)
            except NotPositiveDefiniteError as exc:
                raise NotPositiveDefiniteError(
                    f"layer {l}, position {sess.step_count}: {exc}", (l, sess.step_count) + exc.where
                ) from exc
            o = np.einsum("...ij,...j->...i", st.G, qs)
            reports = [[CGReport(int(it[b_, h]), float(rel[b_, h]), bool(conv[b_, h])) for h in range(nh)]
                       for b_ in range(B)]
        elif cfg.mixer == "mlstm":
            st.z = gamma[..., None] * st.z + beta[..., None] * k
            den = np.maximum(1.0, np.abs(np.sum(st.z * q, axis=-1)))
            o = np.einsum("...ij,...j->...i", st.G, q) / den[..., None]
        else:
            o = np.einsum("...ij,...j->...i", st.G, q)
    o = linalg.rms_norm(o, p["norm"])
    return o.reshape(B, nh * n) @ p["Wo"], reports


def decode_step(sess: DecodeSession, token):
    """Advance every sequence by one token.

    Returns ``(probs, reports, logits)``: next-token probabilities
    ``(batch, vocab)`` (``(vocab,)`` for a scalar token), for the Mesa mixer
    one list per layer of per-sequence, per-head :class:`CGReport` lists, and
    the soft-capped logits ``(batch, vocab)``.
    """
    cfg, P = sess.cfg, sess.params
    scalar = np.ndim(token) == 0
    ids = np.atleast_1d(np.asarray(token))
    if ids.shape[0] != sess.batch:
        raise ValueError(f"expected {sess.batch} tokens, got {ids.shape[0]}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise IndexError(f"token id out of range [0, {cfg.vocab})")
    x = P[EMBED][ids] * np.sqrt(cfg.n_e)
    reports = []
    for l in range(cfg.n_layers):
        m, rep = _mixer_step(sess, l, linalg.rms_norm(x, P[f"l{l}.norm1"]))
        reports.append(rep)
        x = x + m
        h = linalg.rms_norm(x, P[f"l{l}.norm2"])
        x = x + (linalg.silu(h @ P[f"l{l}.mlp.Wgate"]) * (h @ P[f"l{l}.mlp.Wup"])) @ P[f"l{l}.mlp.Wdown"]
    logits = linalg.logit_softcap(x @ P[EMBED].T)
    sess.step_count += 1
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    return (probs[0] if scalar else probs), reports, logits


def decode_logits(sess: DecodeSession, tokens: np.ndarray) -> np.ndarray:
    """Teacher-forced decode of ``(batch, time)`` tokens; returns ``(batch, time, vocab)`` logits."""
    tokens = np.asarray(tokens)
    out = []
    for t in range(tokens.shape[1]):
        _, _, logits = decode_step(sess, tokens[:, t])
        out.append(logits)
    return np.stack(out, axis=1)


@dataclass
class HeadStats:
    layer: int
    head: int
    iters: list = field(default_factory=list)
    cond: dict = field(default_factory=dict)
    gammas: list = field(default_factory=list)

    @property
    def mean_iters(self) -> float:
        return float(np.mean(self.iters)) if self.iters else 0.0

    @property
    def max_iters(self) -> int:
        return int(max(self.iters)) if self.iters else 0

    @property
    def mean_gamma(self) -> float:
        return float(np.mean(self.gammas)) if self.gammas else float("nan")

    def histogram(self) -> dict:
        vals, counts = np.unique(np.asarray(self.iters, dtype=int), return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def head_condition_profile(sess: DecodeSession, sequence, stride: int = COND_STRIDE,
                           rng: np.random.Generator | None = None) -> list[HeadStats]:
    """Decode one sequence, recording per-head CG iterations and gates.

    ``cond`` maps position to the condition number of ``H_t + Lambda``,
    sampled at every ``stride``-th position (starting at 0).
    """
    if sess.cfg.mixer != "mesa":
        raise ValueError("condition profiles need the mesa mixer")
    if sess.batch != 1:
        raise ValueError("head_condition_profile decodes a single sequence")
    rng = rng if rng is not None else linalg.make_rng(0, "sweep")
    cfg = sess.cfg
    stats = [HeadStats(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    for pos, tok in enumerate(np.asarray(sequence)):
        _, reports, _ = decode_step(sess, np.asarray([tok]))
        for l in range(cfg.n_layers):
            lam = sess.lam(l)
            for h in range(cfg.n_heads):
                s = stats[l * cfg.n_heads + h]
                s.iters.append(reports[l][0][h].iterations)
                s.gammas.append(float(sess.last_gammas[l][0, h]))
                if pos % stride == 0:
                    op = SpdOperator(sess.layers[l].H[0, h], lam[h])
                    s.cond[pos] = estimate_condition(op, cfg.n_a, rng)
    return stats


def write_profile_csv(path, stats: list[HeadStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for s in stats:
            for pos, it in enumerate(s.iters):
                cond = s.cond.get(pos)
                w.writerow([s.layer, s.head, pos, it, "" if cond is None else repr(cond),
                            repr(float(np.mean(s.gammas[: pos + 1])))])


def sweep_stopping(session_factory: Callable[[float, int, int], DecodeSession], grid, eval_set) -> list[dict]:
    """Decode ``eval_set = (tokens, targets, mask)`` once per ``(eps, k_max)`` in ``grid``.

    ``session_factory(eps, k_max, batch)`` builds a fresh session. Each row has
    ``eps``, ``k_max``, ``mean_iters``, ``accuracy`` and ``solves`` (the number
    of CG solves, i.e. positions x heads x layers x sequences).
    """
    tokens, targets, mask = (np.asarray(a) for a in eval_set)
    rows = []
    for eps, k_max in grid:
        sess = session_factory(eps, k_max, tokens.shape[0])
        iters = []
        correct = 0.0
        for t in range(tokens.shape[1]):
            probs, reports, _ = decode_step(sess, tokens[:, t])
            for layer in reports:
                for seq in layer:
                    iters.extend(r.iterations for r in seq)
            correct += float(np.sum((np.argmax(probs, axis=-1) == targets[:, t]) * mask[:, t]))
        rows.append({"eps": eps, "k_max": k_max, "mean_iters": float(np.mean(iters)) if iters else 0.0,
                     "accuracy": correct / max(float(mask.sum()), 1.0), "solves": len(iters)})
    return rows
