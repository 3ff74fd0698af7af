"""Linear-recurrent baselines and causal softmax attention.

Single-head step functions mirror the recurrences one-to-one and are used
for inference and as oracles. :func:`recurrent_forward` / :func:`recurrent_backward`
run any of them over ``(..., T, n)`` sequences with plain backprop through
time; these are the tape customs used in training.

Recurrences (``G`` is ``n_v x n_a``):

    mamba2          G = gamma G + v k^T
    gla             G = gamma G + beta v k^T
    deltanet        G = G (I - beta k k^T) + beta v k^T
    gated_deltanet  G = gamma G (I - beta k k^T) + beta v k^T
    mlstm           G = gamma G + beta v k^T, z = gamma z + beta k,
                    o = G q / max(1, |z^T q|)

Longhorn, Titans and Atlas updates are not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("gla", "mamba2", "deltanet", "gated_deltanet", "mlstm")


@dataclass
class LinearAttnState:
    G: np.ndarray
    z: np.ndarray | None = None

    @classmethod
    def zeros(cls, n_v: int, n_a: int, kind: str = "gla", lead: tuple = ()) -> "LinearAttnState":
        z = np.zeros(lead + (n_a,)) if kind == "mlstm" else None
        return cls(np.zeros(lead + (n_v, n_a)), z)


def gla_step(state: LinearAttnState, k, v, q, beta, gamma):
    G = gamma * state.G + beta * np.outer(v, k)
    return LinearAttnState(G), G @ q


def mamba2_step(state: LinearAttnState, k, v, q, gamma):
    return gla_step(state, k, v, q, 1.0, gamma)


def gated_deltanet_step(state: LinearAttnState, k, v, q, beta, gamma):
    G = gamma * (state.G - beta * np.outer(state.G @ k, k)) + beta * np.outer(v, k)
    return LinearAttnState(G), G @ q


def deltanet_step(state: LinearAttnState, k, v, q, beta):
    return gated_deltanet_step(state, k, v, q, beta, 1.0)


def mlstm_step(state: LinearAttnState, k, v, q, beta, gamma):
    G = gamma * state.G + beta * np.outer(v, k)
    z = gamma * state.z + beta * np.asarray(k, float)
    return LinearAttnState(G, z), G @ q / max(1.0, abs(z @ q))


def softmax_attention(K, V, q) -> np.ndarray:
    """Output at the last of ``t`` positions: ``V^T softmax(K q)`` (rows are timesteps)."""
    a = np.asarray(K, float) @ np.asarray(q, float)
    w = np.exp(a - a.max())
    return (w / w.sum()) @ np.asarray(V, float)


def gla_gradient_step_check(Phi, k, v, beta, gamma, grad_fn=None) -> float:
    """Deviation between a gradient step on the Hebbian loss and the GLA update.

    The loss is ``-v^T Phi k + (1 - gamma) / (2 beta) tr(Phi Phi^T)``.
    ``grad_fn(Phi) -> gradient`` may be supplied (e.g. from the tape);
    the analytic gradient is used otherwise.
    """
    Phi, k, v = (np.asarray(a, float) for a in (Phi, k, v))
    if grad_fn is None:
        grad = -np.outer(v, k) + (1 - gamma) / beta * Phi
    else:
        grad = grad_fn(Phi)
    step = Phi - beta * grad
    return float(np.max(np.abs(step - (gamma * Phi + beta * np.outer(v, k)))))


# batched recurrences


def recurrent_forward(kind: str, q, k, v, beta, gamma):
    """Run a baseline over ``(..., T, n)`` inputs; returns ``(O, saved)``."""
    if kind not in KINDS:
        raise ValueError(f"unknown recurrence {kind!r}")
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2], beta.shape[:-1], gamma.shape[:-1])
    T, n_a = k.shape[-2:]
    n_v = v.shape[-1]
    delta = kind in ("deltanet", "gated_deltanet")
    G = np.zeros(lead + (n_v, n_a))
    z = np.zeros(lead + (n_a,))
    Gs = np.empty((T + 1,) + lead + (n_v, n_a))
    zs = np.empty((T + 1,) + lead + (n_a,))
    dens = np.ones(lead + (T,))
    raw = np.empty(lead + (T, n_v))
    Gs[0], zs[0] = G, z
    for t in range(T):
        kt, vt, qt = k[..., t, :], v[..., t, :], q[..., t, :]
        b = beta[..., t, None, None]
        g = gamma[..., t, None, None]
        if delta:
            Gk = np.einsum("...ij,...j->...i", G, kt)
            G = g * (G - b * Gk[..., :, None] * kt[..., None, :]) + b * vt[..., :, None] * kt[..., None, :]
        else:
            G = g * G + b * vt[..., :, None] * kt[..., None, :]
        Gs[t + 1] = G
        raw[..., t, :] = np.einsum("...ij,...j->...i", G, qt)
        if kind == "mlstm":
            z = gamma[..., t, None] * z + beta[..., t, None] * kt
            zs[t + 1] = z
            dens[..., t] = np.maximum(1.0, np.abs(np.sum(z * qt, axis=-1)))
    O = raw / dens[..., None]
    return O, (kind, Gs, zs, dens, raw)


def recurrent_backward(saved, dO, q, k, v, beta, gamma):
    kind, Gs, zs, dens, raw = saved
    lead = Gs.shape[1:-2]
    T, n_a = k.shape[-2:]
    delta = kind in ("deltanet", "gated_deltanet")
    q, k, v = (np.broadcast_to(a, lead + a.shape[-2:]) for a in (q, k, v))
    beta, gamma = np.broadcast_to(beta, lead + (T,)), np.broadcast_to(gamma, lead + (T,))
    dq, dk, dv = np.zeros(q.shape), np.zeros(k.shape), np.zeros(v.shape)
    dbeta, dgamma = np.zeros(lead + (T,)), np.zeros(lead + (T,))
    D = np.zeros(Gs.shape[1:])
    Dz = np.zeros(lead + (n_a,))
    for t in range(T - 1, -1, -1):
        kt, vt, qt = k[..., t, :], v[..., t, :], q[..., t, :]
        bt, gt = beta[..., t], gamma[..., t]
        G, Gp = Gs[t + 1], Gs[t]
        e = dO[..., t, :] / dens[..., t, None]
        if kind == "mlstm":
            n = np.sum(zs[t + 1] * qt, axis=-1)
            ddens = -np.sum(dO[..., t, :] * raw[..., t, :], axis=-1) / dens[..., t] ** 2
            dn = np.where(np.abs(n) > 1.0, np.sign(n) * ddens, 0.0)
            Dz = Dz + dn[..., None] * qt
            dq[..., t, :] += dn[..., None] * zs[t + 1]
        D = D + e[..., :, None] * qt[..., None, :]
        dq[..., t, :] += np.einsum("...ij,...i->...j", G, e)
        Dk = np.einsum("...ij,...j->...i", D, kt)
        if delta:
            Gpk = np.einsum("...ij,...j->...i", Gp, kt)
            # G = g Gp - g b (Gp k) k^T + b v k^T
            dgamma[..., t] = np.sum(D * Gp, axis=(-2, -1)) - bt * np.sum(Dk * Gpk, axis=-1)
            dbeta[..., t] = np.sum(Dk * (vt - gt[..., None] * Gpk), axis=-1)
            dv[..., t, :] = bt[..., None] * Dk
            DTv = np.einsum("...ij,...i->...j", D, vt)
            DTGpk = np.einsum("...ij,...i->...j", D, Gpk)
            GpTDk = np.einsum("...ij,...i->...j", Gp, Dk)
            dk[..., t, :] = bt[..., None] * (DTv - gt[..., None] * (DTGpk + GpTDk))
            D = gt[..., None, None] * (D - bt[..., None, None] * Dk[..., :, None] * kt[..., None, :])
        else:
            dgamma[..., t] = np.sum(D * Gp, axis=(-2, -1))
            dbeta[..., t] = np.sum(Dk * vt, axis=-1)
            dv[..., t, :] = bt[..., None] * Dk
            dk[..., t, :] = bt[..., None] * np.einsum("...ij,...i->...j", D, vt)
            if kind == "mlstm":
                dgamma[..., t] += np.sum(Dz * zs[t], axis=-1)
                dbeta[..., t] += np.sum(Dz * kt, axis=-1)
                dk[..., t, :] += bt[..., None] * Dz
                Dz = gt[..., None] * Dz
            D = gt[..., None, None] * D
    return dq, dk, dv, dbeta, dgamma


def softmax_forward(q, k, v, scale: float):
    """Causal softmax attention over ``(..., T, n)``; returns ``(O, probs)``."""
    T = k.shape[-2]
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    mask = np.tril(np.ones((T, T), dtype=bool))
    logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=-1, keepdims=True)
    return P @ v, P


def softmax_backward(P, dO, q, k, v, scale: float):
    dv = np.swapaxes(P, -1, -2) @ dO
    dP = dO @ np.swapaxes(v, -1, -2)
    dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
    return dS @ k, np.swapaxes(dS, -1, -2) @ q, dv
