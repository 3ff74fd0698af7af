"""Conjugate gradient solves for ``(H + Lambda) x = q``.

The core routine :func:`batched_cg` runs many independent solves at once.
Every column (last-but-one axis) keeps its own step sizes and stops on its
own relative-residual test, so a batch of solves gives the same answers as
running them one at a time. Operator application is the only coupling: it
is passed in as a callable, which lets the chunked Mesa kernel apply all the
per-timestep operators of a chunk with a few matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

POWER_ITERS = 50


class NotPositiveDefiniteError(ArithmeticError):
    """Raised when CG meets a search direction with ``p^T A p <= 0``."""

    def __init__(self, message: str, where: tuple = ()):
        super().__init__(message)
        self.where = where


@dataclass
class CGReport:
    iterations: int
    residual: float
    converged: bool
    condition: float | None = None


@dataclass
class SpdOperator:
    """``gamma * H + k k^T + diag(lam)``; without ``k`` simply ``H + diag(lam)``."""

    H: np.ndarray
    lam: np.ndarray
    gamma: float | None = None
    k: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.lam = np.broadcast_to(np.asarray(self.lam, dtype=float), self.H.shape[:1]).copy()
        if np.any(self.lam <= 0):
            raise ValueError("SpdOperator: regularizer entries must be positive")
        if self.k is not None:
            self.k = np.asarray(self.k, dtype=float)
            if self.gamma is None:
                self.gamma = 1.0

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def matvec(self, p: np.ndarray) -> np.ndarray:
        # p may carry extra leading axes; the vector axis is last
        Hp = p @ self.H  # H symmetric
        if self.k is None:
            return Hp + self.lam * p
        kp = p @ self.k
        return self.gamma * Hp + kp[..., None] * self.k + self.lam * p

    def diagonal(self) -> np.ndarray:
        d = np.diag(self.H).copy()
        if self.k is not None:
            d = self.gamma * d + self.k * self.k
        return d + self.lam

    def dense(self) -> np.ndarray:
        A = self.H.copy()
        if self.k is not None:
            A = self.gamma * A + np.outer(self.k, self.k)
        return A + np.diag(self.lam)


def batched_cg(
    apply: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    diag: np.ndarray,
    eps: float,
    k_max: int,
    init: str = "diag",
):
    """Solve ``A x = b`` for every vector along the last axis of ``b``.

    Returns ``(x, iterations, relative_residual, converged)``; the last three
    have the shape of ``b`` minus its last axis. ``init='diag'`` starts from
    ``b / diag`` (``diag`` is the operator diagonal), ``init='query'`` from
    ``b`` itself.
    """
    if eps < 0 or k_max < 0:
        raise ValueError("batched_cg: eps and k_max must be non-negative")
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise FloatingPointError("batched_cg: non-finite right-hand side")
    # a positive definite operator has a positive diagonal
    bad = ~(np.asarray(diag) > 0).all(axis=-1)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NotPositiveDefiniteError(f"operator has a non-positive diagonal entry at index {where}", where)
    if init == "diag":
        x = b / diag
    elif init == "query":
        x = b.copy()
    else:
        raise ValueError(f"unknown CG init {init!r}")
    r = b - apply(x)
    p = r.copy()
    delta = np.einsum("...i,...i->...", r, r)
    delta0 = delta.copy()
    active = delta0 > 0
    iters = np.zeros(delta.shape, dtype=np.int64)
    for _ in range(k_max):
        if not active.any():
            break
        Ap = apply(p)
        pAp = np.einsum("...i,...i->...", p, Ap)
        bad = active & ~(pAp > 0)
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NotPositiveDefiniteError(
                f"operator lost positive definiteness (p^T A p = {pAp[where]:.3e}) at index {where}",
                where,
            )
        alpha = np.where(active, delta / np.where(active, pAp, 1.0), 0.0)
        x = x + alpha[..., None] * p
        r = r - alpha[..., None] * Ap
        dnew = np.einsum("...i,...i->...", r, r)
        iters += active
        done = np.sqrt(dnew) <= eps * np.sqrt(delta0)
        active = active & ~done
        beta = np.where(active, dnew / np.where(delta > 0, delta, 1.0), 0.0)
        p = np.where(active[..., None], r + beta[..., None] * p, p)
        delta = np.where(active, dnew, delta)
    rnorm = np.sqrt(np.einsum("...i,...i->...", r, r))
    r0 = np.sqrt(delta0)
    relres = np.where(r0 > 0, rnorm / np.where(r0 > 0, r0, 1.0), 0.0)
    converged = (r0 == 0) | (rnorm <= eps * r0)
    return x, iters, relres, converged


def cg_solve(A: SpdOperator, q: np.ndarray, eps: float, k_max: int, init: str = "diag"):
    """Single CG solve. Stops when ``||r|| <= eps * ||r0||`` or after ``k_max`` steps."""
    q = np.asarray(q, dtype=float)
    x, it, rel, conv = batched_cg(A.matvec, q, A.diagonal(), eps, k_max, init)
    return x, CGReport(int(it), float(rel), bool(conv))


def decay_matrix(gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Within-chunk decays for forget gates ``gamma`` (last axis = time).

    Returns ``(Z, boundary)`` with ``Z[i, j] = prod(gamma[i+1 .. j])`` for
    ``j >= i`` (zero below the diagonal) and ``boundary[j] = prod(gamma[0 .. j])``,
    the decay applied to the state entering the chunk.
    """
    g = np.asarray(gamma, dtype=float)
    C = g.shape[-1]
    upper = np.triu(np.ones((C, C), dtype=bool), k=1)
    M = np.where(upper, g[..., None, :], 1.0)
    Z = np.cumprod(M, axis=-1)
    Z = np.where(np.triu(np.ones((C, C), dtype=bool)), Z, 0.0)
    return Z, np.cumprod(g, axis=-1)


def chunk_operator(H_c, K, Zw, boundary, lam):
    """Operator and diagonal for every timestep of a chunk.

    Timestep ``j`` of the chunk uses ``H_j = boundary[j] H_c + sum_i Zw[i, j] k_i k_i^T``;
    ``Zw`` is the decay matrix with any input gates already folded into its rows.
    ``K`` is time x key (row-major).
    """
    def apply(P):
        A = K @ np.swapaxes(P, -1, -2)  # k_i . p_j
        within = np.swapaxes(Zw * A, -1, -2) @ K
        return boundary[..., None] * (P @ H_c) + within + lam[..., None, :] * P

    dH = np.diagonal(H_c, axis1=-2, axis2=-1)
    diag = boundary[..., None] * dH[..., None, :] + np.swapaxes(Zw, -1, -2) @ (K * K) + lam[..., None, :]
    return apply, diag


def cg_solve_chunk(H_c, K_block, Z_block, lam, Q_block, eps, k_max, boundary=None, init="diag"):
    """Solve ``(H_t + Lambda) x_t = q_t`` for every timestep of one chunk.

    ``K_block`` and ``Q_block`` are ``C x n_a`` (time-major). ``Z_block`` is the
    ``C x C`` upper-triangular decay matrix (input gates may be folded into its
    rows) and ``boundary`` the decay of the incoming state ``H_c`` per timestep
    (defaults to ones, i.e. no forgetting of ``H_c``).
    """
    K_block = np.asarray(K_block, dtype=float)
    Q_block = np.asarray(Q_block, dtype=float)
    C = K_block.shape[-2]
    if boundary is None:
        boundary = np.ones(C)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), K_block.shape[-1:])
    apply, diag = chunk_operator(np.asarray(H_c, float), K_block, np.asarray(Z_block, float),
                                 np.asarray(boundary, float), lam)
    X, it, rel, conv = batched_cg(apply, Q_block, diag, eps, k_max, init)
    reports = [CGReport(int(i), float(r), bool(c)) for i, r, c in zip(it, rel, conv)]
    return X, reports


def _lanczos_min(A: SpdOperator, iters: int, rng: np.random.Generator) -> float:
    """Smallest Ritz value from the Lanczos tridiagonal implied by CG coefficients."""
    n = A.n
    b = rng.standard_normal(n)
    x = np.zeros(n)
    r = b.copy()
    p = r.copy()
    delta = r @ r
    alphas, betas = [], []
    for _ in range(max(1, iters)):
        Ap = A.matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise NotPositiveDefiniteError("condition estimate: operator not positive definite")
        alpha = delta / pAp
        x += alpha * p
        r -= alpha * Ap
        dnew = r @ r
        alphas.append(alpha)
        if dnew <= (1e-14) ** 2 * (b @ b):
            break
        beta = dnew / delta
        betas.append(beta)
        p = r + beta * p
        delta = dnew
    m = len(alphas)
    T = np.zeros((m, m))
    for j in range(m):
        T[j, j] = 1.0 / alphas[j] + (betas[j - 1] / alphas[j - 1] if j > 0 else 0.0)
        if j + 1 < m:
            T[j, j + 1] = T[j + 1, j] = np.sqrt(betas[j]) / alphas[j]
    return float(np.linalg.eigvalsh(T)[0])


def estimate_condition(A: SpdOperator, iters: int, rng: np.random.Generator) -> float:
    """``lambda_max / lambda_min`` of the operator.

    ``lambda_max`` comes from ``POWER_ITERS`` steps of power iteration
    (Rayleigh quotient), ``lambda_min`` from ``iters`` CG steps.
    """
    if iters < 1:
        raise ValueError("estimate_condition: iters must be >= 1")
    v = rng.standard_normal(A.n)
    v /= np.linalg.norm(v)
    lmax = 0.0
    for _ in range(POWER_ITERS):
        w = A.matvec(v)
        lmax = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
    lmin = _lanczos_min(A, iters, rng)
    return max(1.0, lmax / lmin)
