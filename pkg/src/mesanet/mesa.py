"""The Mesa layer: ``o_t = G_t (H_t + Lambda)^{-1} q_t``.

Two execution paths are provided. :func:`mesa_step` advances the recurrent
state one token at a time (inference). :func:`mesa_forward_chunked` processes
a whole sequence chunk by chunk, materializing ``G`` and ``H`` only at chunk
boundaries and solving all the linear systems of a chunk together;
:func:`mesa_backward_chunked` is its hand-derived reverse pass.

Arrays are time-major: keys, values and queries are ``(..., T, n)`` and the
gates are ``(..., T)``. Input gates are folded into the rows of the decay
matrix, so ``H_t = sum_i zeta_ti beta_i k_i k_i^T`` without square roots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cg import (
    CGReport,
    SpdOperator,
    batched_cg,
    cg_solve,
    chunk_operator,
    decay_matrix,
)

LAMBDA_FLOOR = 0.25
LAMBDA_FLOOR_TRACKING = 49.0
GAMMA_CAP = 0.9975


@dataclass
class MesaState:
    G: np.ndarray
    H: np.ndarray

    @classmethod
    def zeros(cls, n_v: int, n_a: int, lead: tuple = ()) -> "MesaState":
        return cls(np.zeros(lead + (n_v, n_a)), np.zeros(lead + (n_a, n_a)))


def _swap(x):
    return np.swapaxes(x, -1, -2)


def mesa_step(state: MesaState, k, v, q, beta: float, gamma: float, lam, eps: float = 1e-12,
              k_max: int = 100, init: str = "diag"):
    """One recurrent step for a single head.

    The solve uses the rank-one form ``gamma H_{t-1} + beta k k^T + Lambda``
    so ``H_t`` is only materialized after the output is known.
    """
    k = np.asarray(k, float)
    v = np.asarray(v, float)
    sb = np.sqrt(beta)
    op = SpdOperator(state.H, lam, gamma=gamma, k=sb * k)
    G = gamma * state.G + beta * np.outer(v, k)
    H = gamma * state.H + beta * np.outer(k, k)
    qstar, report = cg_solve(op, q, eps, k_max, init)
    return MesaState(G, H), G @ qstar, report


def mesa_step_batched(G, H, k, v, q, beta, gamma, lam, eps=1e-12, k_max=100, init="diag"):
    """:func:`mesa_step` over leading axes (heads, batch). Returns ``(G, H, o, iters)``."""
    beta = np.asarray(beta, float)[..., None, None]
    gamma = np.asarray(gamma, float)[..., None, None]
    G = gamma * G + beta * (v[..., :, None] * k[..., None, :])
    H = gamma * H + beta * (k[..., :, None] * k[..., None, :])
    lam = np.broadcast_to(lam, q.shape)

    def apply(p):
        return np.einsum("...ij,...j->...i", H, p) + lam * p

    diag = np.diagonal(H, axis1=-2, axis2=-1) + lam
    qstar, iters, _, _ = batched_cg(apply, q, diag, eps, k_max, init)
    o = np.einsum("...ij,...j->...i", G, qstar)
    return G, H, o, iters


def cumulative_decay(gamma: np.ndarray) -> np.ndarray:
    """``zeta[t, s] = prod(gamma[s+1 .. t])`` for ``t >= s``, zero otherwise."""
    Z, _ = decay_matrix(gamma)
    return _swap(Z)


def closed_form_phi(K, V, beta, gamma, lam) -> np.ndarray:
    """Minimizer of the Mesa objective at the last timestep, by dense solve."""
    K = np.asarray(K, float)
    V = np.asarray(V, float)
    if K.shape[0] < 1:
        raise ValueError("closed_form_phi: need at least one timestep")
    w = cumulative_decay(np.asarray(gamma, float))[-1] * np.asarray(beta, float)
    Gt = (V * w[:, None]).T @ K
    Ht = (K * w[:, None]).T @ K
    A = Ht + np.diag(np.broadcast_to(lam, K.shape[1:]))
    try:
        return np.linalg.solve(A, Gt.T).T  # A symmetric
    except np.linalg.LinAlgError as exc:
        raise ValueError("closed_form_phi: singular system") from exc


def mesa_objective(Phi, K, V, beta, gamma, lam) -> float:
    """``1/2 sum_t' zeta beta ||v - Phi k||^2 + 1/2 tr(Phi Lambda Phi^T)`` at the last step."""
    K = np.asarray(K, float)
    V = np.asarray(V, float)
    w = cumulative_decay(np.asarray(gamma, float))[-1] * np.asarray(beta, float)
    resid = V - K @ Phi.T
    lam = np.broadcast_to(lam, K.shape[1:])
    return 0.5 * float(np.sum(w * np.sum(resid * resid, axis=1))) + 0.5 * float(np.sum(Phi * Phi * lam))


def mesa_objective_grad(Phi, K, V, beta, gamma, lam) -> np.ndarray:
    K = np.asarray(K, float)
    V = np.asarray(V, float)
    w = cumulative_decay(np.asarray(gamma, float))[-1] * np.asarray(beta, float)
    resid = V - K @ Phi.T
    return -(resid * w[:, None]).T @ K + Phi * np.broadcast_to(lam, K.shape[1:])


@dataclass
class MesaSaved:
    """Forward quantities kept for the reverse pass."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    chunk: int
    eps: float
    k_max: int
    init: str
    qstar: np.ndarray
    G_starts: list = field(default_factory=list)
    H_starts: list = field(default_factory=list)
    iters: np.ndarray | None = None
    residuals: np.ndarray | None = None
    final: MesaState | None = None


def _chunks(T: int, C: int):
    c = 0
    while c < T:
        yield c, min(C, T - c)
        c += C


def mesa_forward_chunked(q, k, v, beta, gamma, lam, chunk: int, eps: float = 1e-12,
                         k_max: int = 100, init: str = "diag", states: MesaState | None = None):
    """Chunkwise-parallel Mesa forward.

    Returns ``(O, saved)``. ``saved.iters`` holds the CG iteration count of
    every ``(…, t)`` solve. The last chunk may be shorter than ``chunk``.
    """
    q = np.asarray(q, float)
    k = np.asarray(k, float)
    v = np.asarray(v, float)
    beta = np.asarray(beta, float)
    gamma = np.asarray(gamma, float)
    if chunk < 1:
        raise ValueError("chunk size must be >= 1")
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2], beta.shape[:-1], gamma.shape[:-1])
    T, n_a = k.shape[-2], k.shape[-1]
    n_v = v.shape[-1]
    q, k = np.broadcast_to(q, lead + (T, n_a)), np.broadcast_to(k, lead + (T, n_a))
    v = np.broadcast_to(v, lead + (T, n_v))
    beta, gamma = np.broadcast_to(beta, lead + (T,)), np.broadcast_to(gamma, lead + (T,))
    lam = np.broadcast_to(np.asarray(lam, float), lead + (n_a,))
    if states is None:
        G_c = np.zeros(lead + (n_v, n_a))
        H_c = np.zeros(lead + (n_a, n_a))
    else:
        G_c, H_c = states.G, states.H
    O = np.empty(lead + (T, n_v))
    qstar = np.empty(lead + (T, n_a))
    iters = np.empty(lead + (T,), dtype=np.int64)
    resid = np.empty(lead + (T,))
    saved = MesaSaved(q, k, v, beta, gamma, lam, chunk, eps, k_max, init, qstar)
    for c, C in _chunks(T, chunk):
        sl = slice(c, c + C)
        K, V, Q = k[..., sl, :], v[..., sl, :], q[..., sl, :]
        Z, bnd = decay_matrix(gamma[..., sl])
        Zb = Z * beta[..., sl, None]
        apply, diag = chunk_operator(H_c, K, Zb, bnd, lam)
        Qs, it, rel, _ = batched_cg(apply, Q, diag, eps, k_max, init)
        saved.G_starts.append(G_c)
        saved.H_starts.append(H_c)
        qstar[..., sl, :] = Qs
        iters[..., sl] = it
        resid[..., sl] = rel
        O[..., sl, :] = bnd[..., None] * (Qs @ _swap(G_c)) + _swap(Zb * (K @ _swap(Qs))) @ V
        w = Zb[..., :, -1]
        last = bnd[..., -1, None, None]
        G_c = last * G_c + _swap(V * w[..., None]) @ K
        H_c = last * H_c + _swap(K * w[..., None]) @ K
        H_c = 0.5 * (H_c + _swap(H_c))
    saved.iters = iters
    saved.residuals = resid
    saved.final = MesaState(G_c, H_c)
    return O, saved


def mesa_backward_chunked(saved: MesaSaved, dO: np.ndarray) -> dict:
    """Reverse pass of :func:`mesa_forward_chunked`.

    Treats every ``q*_t`` as an exact solve. With ``e*_t = (H_t+Lambda)^{-1} G_t^T e_t``
    and the reverse-time accumulators ``A_s = sum_{t>=s} zeta_ts e_t q*_t^T`` and
    ``B_s = sum_{t>=s} zeta_ts e*_t q*_t^T``:

    - ``dq_t = e*_t``, ``dLambda = -sum_t q*_t * e*_t``
    - ``dv_s = beta_s A_s k_s``
    - ``dk_s = beta_s (A_s^T v_s - (B_s + B_s^T) k_s)``
    - ``dbeta_s = v_s^T A_s k_s - k_s^T B_s k_s``
    - ``dgamma_s = <G_{s-1}, A_s> - <H_{s-1}, B_s>``, split into four
      chunk-local terms so only boundary states are needed.
    """
    s = saved
    dO = np.asarray(dO, float)
    lead = s.k.shape[:-2]
    T, n_a = s.k.shape[-2:]
    n_v = s.v.shape[-1]
    dq = np.zeros(lead + (T, n_a))
    dk = np.zeros(lead + (T, n_a))
    dv = np.zeros(lead + (T, n_v))
    dbeta = np.zeros(lead + (T,))
    dgamma = np.zeros(lead + (T,))
    dlam = np.zeros(lead + (n_a,))
    Fb = np.zeros(lead + (n_v, n_a))  # A passed back into the previous chunk
    Bb = np.zeros(lead + (n_a, n_a))
    bounds = list(_chunks(T, s.chunk))
    e_iters = np.zeros(lead + (T,), dtype=np.int64)
    for idx in range(len(bounds) - 1, -1, -1):
        c, C = bounds[idx]
        sl = slice(c, c + C)
        G_c, H_c = s.G_starts[idx], s.H_starts[idx]
        K, V, Qs, E = s.k[..., sl, :], s.v[..., sl, :], s.qstar[..., sl, :], dO[..., sl, :]
        bt = s.beta[..., sl]
        Z, bnd = decay_matrix(s.gamma[..., sl])
        Zb = Z * bt[..., :, None]
        apply, diag = chunk_operator(H_c, K, Zb, bnd, s.lam)
        # right-hand sides G_t^T e_t
        VE = V @ _swap(E)
        rhs = bnd[..., None] * (E @ G_c) + _swap(Zb * VE) @ K
        Es, it, _, _ = batched_cg(apply, rhs, diag, s.eps, s.k_max, s.init)
        e_iters[..., sl] = it
        dq[..., sl, :] = Es
        dlam -= np.sum(Qs * Es, axis=-2)

        KQ = K @ _swap(Qs)
        KEs = K @ _swap(Es)
        zl = Z[..., :, -1]
        Ak = (Z * KQ) @ E + zl[..., None] * (K @ _swap(Fb))
        ATv = (Z * VE) @ Qs + zl[..., None] * (V @ Fb)
        Bk = (Z * KQ) @ Es + zl[..., None] * (K @ _swap(Bb))
        BTk = (Z * KEs) @ Qs + zl[..., None] * (K @ Bb)
        b_ = bt[..., None]
        dv[..., sl, :] = b_ * Ak
        dk[..., sl, :] = b_ * (ATv - Bk - BTk)
        dbeta[..., sl] = np.sum(V * Ak, axis=-1) - np.sum(K * Bk, axis=-1)

        # forget-gate gradient: <G_{s-1}, A_s> - <H_{s-1}, B_s>
        bm = np.concatenate([np.ones(lead + (1,)), bnd[..., :-1]], axis=-1)
        Zs = np.zeros_like(Zb)
        Zs[..., :, 1:] = Zb[..., :, :-1]
        ZT = _swap(Z)
        g_G = np.sum((E @ G_c) * Qs, axis=-1)
        g_H = np.sum((Es @ H_c) * Qs, axis=-1)
        f_G = np.sum((V @ Fb) * K, axis=-1)
        f_H = np.sum((K @ Bb) * K, axis=-1)
        t1 = bm * zl * (np.sum(G_c * Fb, axis=(-2, -1))[..., None]
                        - np.sum(H_c * Bb, axis=(-2, -1))[..., None])
        t2 = bm * ((Z @ g_G[..., None])[..., 0] - (Z @ g_H[..., None])[..., 0])
        t3 = zl * ((_swap(Zs) @ (f_G - f_H)[..., None])[..., 0])
        M = VE * KQ - KEs * KQ
        t4 = np.sum(Zs * (M @ ZT), axis=-2)
        dgamma[..., sl] = t1 + t2 + t3 + t4

        Fb = _swap(E * bnd[..., None]) @ Qs + bnd[..., -1, None, None] * Fb
        Bb = _swap(Es * bnd[..., None]) @ Qs + bnd[..., -1, None, None] * Bb
    return {"q": dq, "k": dk, "v": dv, "beta": dbeta, "gamma": dgamma, "lam": dlam,
            "iters": e_iters}


def sherman_morrison_step(Rinv: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Rank-one inverse update ``(R + k k^T)^{-1}`` from ``R^{-1}``."""
    u = Rinv @ k
    denom = 1.0 + k @ u
    if not denom > 0:
        raise ValueError(f"sherman_morrison_step: non-positive denominator {denom}")
    return Rinv - np.outer(u, u) / denom


def sherman_morrison_outputs(K, V, Q, lam) -> np.ndarray:
    """Recursive least-squares outputs ``G_t R_t^{-1} q_t`` with no forgetting."""
    K, V, Q = (np.asarray(a, float) for a in (K, V, Q))
    Rinv = np.diag(1.0 / np.broadcast_to(lam, K.shape[1:]))
    G = np.zeros((V.shape[1], K.shape[1]))
    out = np.empty((K.shape[0], V.shape[1]))
    for t in range(K.shape[0]):
        Rinv = sherman_morrison_step(Rinv, K[t])
        G = G + np.outer(V[t], K[t])
        out[t] = G @ (Rinv @ Q[t])
    return out


def newton_identity_check(K, V, lam, t: int) -> float:
    """Max deviation between ``G_t H_t^{-1}`` and one Newton step from ``Phi_{t-1}``.

    Uses ``H_0 = Lambda`` and no forgetting. The Newton form is
    ``Phi_{t-1} - (Phi_{t-1} k_t - v_t) k_t^T H_t^{-1}``.
    """
    K, V = np.asarray(K, float), np.asarray(V, float)
    n_a = K.shape[1]
    H = np.diag(np.broadcast_to(np.asarray(lam, float), (n_a,)))
    G = np.zeros((V.shape[1], n_a))
    for i in range(t - 1):
        H = H + np.outer(K[i], K[i])
        G = G + np.outer(V[i], K[i])
    Phi_prev = np.linalg.solve(H, G.T).T
    k_t, v_t = K[t - 1], V[t - 1]
    H_t = H + np.outer(k_t, k_t)
    G_t = G + np.outer(v_t, k_t)
    Hinv = np.linalg.inv(H_t)
    direct = G_t @ Hinv
    newton = Phi_prev - np.outer(Phi_prev @ k_t - v_t, k_t) @ Hinv
    # intermediate forms of the same chain
    via_state = (Phi_prev @ H + np.outer(v_t, k_t)) @ Hinv
    via_split = Phi_prev @ (H_t - np.outer(k_t, k_t)) @ Hinv + np.outer(v_t, k_t) @ Hinv
    return float(max(np.max(np.abs(direct - newton)), np.max(np.abs(direct - via_state)),
                     np.max(np.abs(direct - via_split))))


def mesa_sequential(q, k, v, beta, gamma, lam, eps=1e-12, k_max=100, init="diag"):
    """Step-by-step reference: returns ``(O, iters)`` for ``(..., T, n)`` inputs."""
    q, k, v = (np.asarray(a, float) for a in (q, k, v))
    beta, gamma = np.asarray(beta, float), np.asarray(gamma, float)
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2], beta.shape[:-1], gamma.shape[:-1])
    T, n_a = k.shape[-2:]
    n_v = v.shape[-1]
    G = np.zeros(lead + (n_v, n_a))
    H = np.zeros(lead + (n_a, n_a))
    lam = np.broadcast_to(np.asarray(lam, float), lead + (n_a,))
    O = np.empty(lead + (T, n_v))
    iters = np.empty(lead + (T,), dtype=np.int64)
    for t in range(T):
        G, H, o, it = mesa_step_batched(
            G, H,
            np.broadcast_to(k[..., t, :], lead + (n_a,)),
            np.broadcast_to(v[..., t, :], lead + (n_v,)),
            np.broadcast_to(q[..., t, :], lead + (n_a,)),
            np.broadcast_to(beta[..., t], lead), np.broadcast_to(gamma[..., t], lead),
            lam, eps, k_max, init)
        O[..., t, :] = o
        iters[..., t] = it
    return O, iters


__all__ = [
    "CGReport", "MesaState", "MesaSaved", "mesa_step", "mesa_step_batched", "closed_form_phi",
    "mesa_objective", "mesa_objective_grad", "mesa_forward_chunked", "mesa_backward_chunked",
    "sherman_morrison_step", "sherman_morrison_outputs", "newton_identity_check",
    "mesa_sequential", "cumulative_decay", "LAMBDA_FLOOR", "LAMBDA_FLOOR_TRACKING", "GAMMA_CAP",
]
