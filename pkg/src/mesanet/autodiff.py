"""A small reverse-mode tape over numpy arrays.

Nodes are integer ids into a :class:`Tape`. Each primitive supplies a forward
function returning ``(value, saved)`` and a backward function mapping the
upstream gradient to one gradient per input (``None`` where an input is not
differentiable). Layers with hand-written reverse passes (the Mesa kernel,
the baseline recurrences) register themselves as primitives too.

    tape = Tape()
    w = tape.param("w", np.ones(3))
    loss = tape.sum(tape.mul(w, w))
    grads = tape.backward(loss)      # {"w": 2 * ones}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import linalg


@dataclass
class Primitive:
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, forward: Callable, backward: Callable) -> None:
    PRIMITIVES[name] = Primitive(forward, backward)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    value: np.ndarray
    saved: object = None
    attrs: dict | None = None


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.param_names: dict[int, str] = {}
        self.grads: dict[int, np.ndarray] = {}
        self._spent = False

    def leaf(self, value, name: str | None = None) -> int:
        nid = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), np.asarray(value, dtype=float)))
        if name is not None:
            self.param_names[nid] = name
        return nid

    def param(self, name: str, value) -> int:
        return self.leaf(value, name)

    def const(self, value) -> int:
        return self.leaf(value)

    def record(self, op: str, inputs, **attrs) -> int:
        if op not in PRIMITIVES:
            raise KeyError(f"unknown primitive {op!r}")
        inputs = tuple(inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input node {i} not on tape")
        vals = [self.nodes[i].value for i in inputs]
        out, saved = PRIMITIVES[op].forward(*vals, **attrs)
        out = np.asarray(out, dtype=float)
        self.nodes.append(TapeNode(op, inputs, out, saved, attrs))
        return len(self.nodes) - 1

    def __getattr__(self, op: str):
        if op in PRIMITIVES:
            return lambda *inputs, **attrs: self.record(op, inputs, **attrs)
        raise AttributeError(op)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def saved(self, nid: int):
        return self.nodes[nid].saved

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every named parameter leaf."""
        if self._spent:
            raise RuntimeError("backward already ran on this tape; record a new one")
        if self.nodes[loss].value.size != 1:
            raise ValueError("backward: loss node must be scalar")
        self._spent = True
        grads: dict[int, np.ndarray] = {loss: np.ones_like(self.nodes[loss].value)}
        for nid in range(loss, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            in_grads = PRIMITIVES[node.op].backward(g, node.saved, *vals, **node.attrs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                gi = np.asarray(gi, dtype=float)
                if gi.shape != self.nodes[i].value.shape:
                    gi = unbroadcast(gi, self.nodes[i].value.shape)
                grads[i] = grads[i] + gi if i in grads else gi
        self.grads = grads
        out = {}
        for nid, name in self.param_names.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(self.nodes[nid].value)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
            out[name] = g
        return out


def sum_gradients(parts: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Deterministic reduction of per-shard gradients, in sorted name order."""
    out = {}
    for name in sorted(parts[0]):
        acc = np.zeros_like(parts[0][name])
        for p in parts:
            acc = acc + p[name]
        out[name] = acc
    return out


# elementwise arithmetic


register("add", lambda a, b: (a + b, None), lambda g, s, a, b: (g, g))
register("sub", lambda a, b: (a - b, None), lambda g, s, a, b: (g, -g))
register("mul", lambda a, b: (a * b, None), lambda g, s, a, b: (g * b, g * a))
register("scale", lambda a, c: (a * c, None), lambda g, s, a, c: (g * c,))
register("shift", lambda a, c: (a + c, None), lambda g, s, a, c: (g,))
register("clamp_max", lambda a, c: (np.minimum(a, c), None), lambda g, s, a, c: (g * (a < c),))
register("sum", lambda a: (np.sum(a), None), lambda g, s, a: (np.broadcast_to(g, a.shape),))


def _matmul_fwd(a, b):
    return a @ b, None


def _matmul_bwd(g, s, a, b):
    if b.ndim == 2 and a.ndim > 2:
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


register("matmul", _matmul_fwd, _matmul_bwd)
register("reshape", lambda a, shape: (a.reshape(shape), None),
         lambda g, s, a, shape: (g.reshape(a.shape),))
register("transpose", lambda a, axes: (np.transpose(a, axes), None),
         lambda g, s, a, axes: (np.transpose(g, np.argsort(axes)),))


def _slice_bwd(g, s, a, index):
    out = np.zeros_like(a)
    out[index] = g
    return (out,)


register("slice", lambda a, index: (a[index], None), _slice_bwd)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis), None


def _concat_bwd(g, s, *xs, axis):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


register("concat", _concat_fwd, _concat_bwd)

# activations


def _sigmoid_fwd(a):
    s = linalg.sigmoid(a)
    return s, s


register("sigmoid", _sigmoid_fwd, lambda g, s, a: (g * s * (1 - s),))


def _silu_fwd(a):
    s = linalg.sigmoid(a)
    return a * s, s


register("silu", _silu_fwd, lambda g, s, a: (g * s * (1 + a * (1 - s)),))
register("softplus", lambda a: (linalg.softplus(a), None),
         lambda g, s, a: (g * linalg.sigmoid(a),))


def _tanh_fwd(a):
    t = np.tanh(a)
    return t, t


register("tanh", _tanh_fwd, lambda g, s, a: (g * (1 - s * s),))

# normalizations


def _rms_fwd(x, w, eps=linalg.RMS_EPS):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * w, inv


def _rms_bwd(g, inv, x, w, eps=linalg.RMS_EPS):
    n = x.shape[-1]
    xhat = x * inv
    gw = g * xhat
    gx_hat = g * w
    gx = inv * (gx_hat - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True) / n)
    return gx, gw


register("rms_norm", _rms_fwd, _rms_bwd)


def _l2_fwd(x):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    keep = norm > linalg.NORM_GUARD
    safe = np.where(keep, norm, 1.0)
    return x / safe, (safe, keep)


def _l2_bwd(g, saved, x):
    safe, keep = saved
    u = x / safe
    proj = g - u * np.sum(g * u, axis=-1, keepdims=True)
    return (np.where(keep, proj / safe, g),)


register("l2_normalize", _l2_fwd, _l2_bwd)

# sequence ops


def _conv_fwd(x, b):
    return linalg.causal_conv4(x, b), None


def _conv_bwd(g, s, x, b):
    T = x.shape[-2]
    gx = np.zeros(np.broadcast_shapes(x.shape, b.shape[:-1] + (1, 1)))
    gb = np.zeros(np.broadcast_shapes(b.shape[:-1], x.shape[:-2]) + (4,))
    for i in range(min(4, T)):
        tap = b[..., i][..., None, None]
        gx[..., : T - i, :] += tap * g[..., i:, :]
        gb[..., i] = np.sum(g[..., i:, :] * x[..., : T - i, :], axis=(-2, -1))
    return unbroadcast(gx, x.shape), unbroadcast(gb, b.shape)


register("conv4", _conv_fwd, _conv_bwd)


def _embed_fwd(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return table[ids], None


def _embed_bwd(g, s, table, ids):
    gt = np.zeros_like(table)
    np.add.at(gt, np.asarray(ids).reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


register("embed", _embed_fwd, _embed_bwd)


def _xent_fwd(logits, targets, mask=None):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    t = np.asarray(targets)
    nll = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    m = np.ones_like(nll) if mask is None else np.asarray(mask, dtype=float)
    denom = max(float(m.sum()), 1.0)
    return np.sum(nll * m) / denom, (logp, m, denom)


def _xent_bwd(g, saved, logits, targets, mask=None):
    logp, m, denom = saved
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, np.asarray(targets)[..., None], 1.0, axis=-1)
    return (g * (p - onehot) * (m / denom)[..., None],)


register("cross_entropy", _xent_fwd, _xent_bwd)
