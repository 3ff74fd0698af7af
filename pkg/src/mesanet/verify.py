"""Oracle suites behind ``mesanet verify``.

Each check draws random instances, compares the library against an
independent route (dense solves, brute-force sums, finite differences) and
returns a :class:`CheckResult`. The measurement helpers (``*_deviation``)
are also used directly by the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import baselines
from .autodiff import Tape
from .cg import SpdOperator, cg_solve, cg_solve_chunk, decay_matrix, estimate_condition
from .linalg import l2_normalize, make_rng
from .mesa import (
    MesaState,
    closed_form_phi,
    mesa_backward_chunked,
    mesa_forward_chunked,
    mesa_objective,
    mesa_objective_grad,
    mesa_sequential,
    mesa_step,
    newton_identity_check,
    sherman_morrison_outputs,
)

SUITES = ("cg", "mesa", "baselines", "grads", "app_f")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.value:.3e} (limit {self.limit:.1e})"


def _check(name, value, limit) -> CheckResult:
    return CheckResult(name, bool(value <= limit), float(value), float(limit))


def random_spd(rng, n: int, lam_min: float = 0.25):
    """Random Mesa-style state ``H = sum_i w_i k_i k_i^T`` and a regularizer ``>= lam_min``.

    Up to ``4 n`` unit keys with weights in ``(0, 1]`` (decayed input gates).
    """
    m = int(rng.integers(1, 4 * n + 1))
    K = unit_rows(rng, (m, n))
    w = rng.uniform(0.0, 1.0, m)
    H = (K * w[:, None]).T @ K
    lam = lam_min + rng.uniform(0.0, 1.0, n)
    return H, lam


def unit_rows(rng, shape):
    return l2_normalize(rng.standard_normal(shape))


# CG


def cg_direct_deviation(rng, n_systems=200, sizes=(4, 8, 16, 32), eps=1e-10):
    """Max relative error of CG against ``numpy.linalg.solve``."""
    worst = 0.0
    for _ in range(n_systems):
        n = int(rng.choice(sizes))
        H, lam = random_spd(rng, n)
        q = rng.standard_normal(n)
        x, _ = cg_solve(SpdOperator(H, lam), q, eps, 10 * n)
        ref = np.linalg.solve(H + np.diag(lam), q)
        worst = max(worst, np.linalg.norm(x - ref) / np.linalg.norm(ref))
    return worst


def cg_exact_termination(rng, n_systems=200, sizes=(4, 8, 16, 32)):
    """``(max relative error, max iterations - n)`` for ``eps = 0`` with ``k_max = n``."""
    worst, excess = 0.0, -np.inf
    for _ in range(n_systems):
        n = int(rng.choice(sizes))
        H, lam = random_spd(rng, n)
        q = rng.standard_normal(n)
        x, rep = cg_solve(SpdOperator(H, lam), q, 0.0, n)
        ref = np.linalg.solve(H + np.diag(lam), q)
        worst = max(worst, np.linalg.norm(x - ref) / np.linalg.norm(ref))
        excess = max(excess, rep.iterations - n)
    return worst, excess


def cg_chunk_deviation(rng, n_cases=10, C=16, n_a=8):
    """Chunked solves against one ``cg_solve`` per timestep on the same operator."""
    worst = 0.0
    for _ in range(n_cases):
        H_c, lam = random_spd(rng, n_a)
        K = unit_rows(rng, (C, n_a))
        Q = unit_rows(rng, (C, n_a))
        beta = rng.uniform(0, 1, C)
        gamma = rng.uniform(0, 1, C)
        Z, bnd = decay_matrix(gamma)
        Zb = Z * beta[:, None]
        X, _ = cg_solve_chunk(H_c, K, Zb, lam, Q, 1e-12, 200, boundary=bnd)
        for j in range(C):
            Hj = bnd[j] * H_c + (K * Zb[:, j, None]).T @ K
            x, _ = cg_solve(SpdOperator(Hj, lam), Q[j], 1e-12, 200)
            worst = max(worst, np.max(np.abs(X[j] - x)))
    return worst


def condition_deviation(rng, n_cases=20, sizes=(4, 8, 16, 32)):
    """Max relative error of ``estimate_condition`` against eigenvalues."""
    worst = 0.0
    for _ in range(n_cases):
        n = int(rng.choice(sizes))
        H, lam = random_spd(rng, n)
        ev = np.linalg.eigvalsh(H + np.diag(lam))
        est = estimate_condition(SpdOperator(H, lam), n, rng)
        worst = max(worst, abs(est - ev[-1] / ev[0]) / (ev[-1] / ev[0]))
    return worst


# Mesa


def random_mesa_inputs(rng, lead, T, n_a, n_v=None):
    n_v = n_v or n_a
    q = unit_rows(rng, lead + (T, n_a))
    k = unit_rows(rng, lead + (T, n_a))
    v = rng.standard_normal(lead + (T, n_v))
    beta = rng.uniform(0, 1, lead + (T,))
    gamma = rng.uniform(0, 1, lead + (T,))
    lam = 0.25 + rng.uniform(0, 1, lead[-1:] + (n_a,) if lead else (n_a,))
    return q, k, v, beta, gamma, lam


def chunk_vs_sequential(rng, n_configs=50, T_max=128, heads_max=4, sizes=(4, 8, 16)):
    worst = 0.0
    for _ in range(n_configs):
        T = int(rng.integers(1, T_max + 1))
        h = int(rng.integers(1, heads_max + 1))
        n_a = int(rng.choice(sizes))
        args = random_mesa_inputs(rng, (h,), T, n_a)
        ref, _ = mesa_sequential(*args, eps=1e-12, k_max=200)
        for C in sorted({1, 4, 16, T}):
            O, _ = mesa_forward_chunked(*args, chunk=C, eps=1e-12, k_max=200)
            worst = max(worst, np.max(np.abs(O - ref)))
    return worst


def backward_fd_error(rng, n_configs=20, h=1e-5, floor=1e-7):
    """Max of ``|analytic - numeric| / max(|numeric|, floor / 1e-4)`` over all gradient entries.

    A value ``<= 1e-4`` means every entry is within relative 1e-4 or absolute 1e-7.
    """
    worst = 0.0
    for _ in range(n_configs):
        T = int(rng.integers(1, 17))
        n_a = int(rng.integers(2, 9))
        n_v = int(rng.integers(2, 9))
        C = int(rng.integers(1, T + 1))
        q, k, v, beta, gamma, lam = random_mesa_inputs(rng, (), T, n_a, n_v)
        beta = rng.uniform(0.1, 1, T)
        E = rng.standard_normal((T, n_v))
        args = {"q": q, "k": k, "v": v, "beta": beta, "gamma": gamma, "lam": lam}

        def loss():
            O, _ = mesa_forward_chunked(args["q"], args["k"], args["v"], args["beta"], args["gamma"],
                                        args["lam"], C, 1e-13, 500)
            return float(np.sum(E * O))

        _, saved = mesa_forward_chunked(q, k, v, beta, gamma, lam, C, 1e-13, 500)
        grads = mesa_backward_chunked(saved, E)
        for name, a in args.items():
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                lp = loss()
                a[idx] = old - h
                lm = loss()
                a[idx] = old
                num = (lp - lm) / (2 * h)
                err = abs(grads[name][idx] - num) / max(abs(num), floor / 1e-4)
                worst = max(worst, err)
    return worst


def optimality_check(rng, n_rollouts=20, n_perturb=100, T=12, n_a=6):
    """``(max |grad| at the implied Phi_t, number of perturbations that lowered the objective)``."""
    max_grad, violations = 0.0, 0
    for _ in range(n_rollouts):
        q, k, v, beta, gamma, lam = random_mesa_inputs(rng, (), T, n_a)
        st = MesaState.zeros(n_a, n_a)
        for t in range(T):
            st, _, _ = mesa_step(st, k[t], v[t], q[t], beta[t], gamma[t], lam, eps=1e-12)
            Phi = np.linalg.solve(st.H + np.diag(lam), st.G.T).T
            g = mesa_objective_grad(Phi, k[: t + 1], v[: t + 1], beta[: t + 1], gamma[: t + 1], lam)
            max_grad = max(max_grad, np.max(np.abs(g)))
        Phi = closed_form_phi(k, v, beta, gamma, lam)
        base = mesa_objective(Phi, k, v, beta, gamma, lam)
        for _ in range(n_perturb):
            d = rng.standard_normal(Phi.shape)
            d *= 1e-3 / np.linalg.norm(d)
            if mesa_objective(Phi + d, k, v, beta, gamma, lam) < base:
                violations += 1
    return max_grad, violations


def one_shot_errors(rng, n_a=8, lam_small=1e-3, t=None):
    """``(single-write error, max per-pair error for t orthogonal writes)``.

    Keys and values are unit vectors; ``t`` defaults to ``n_a``.
    """
    t_max = n_a if t is None else t
    lam = float(rng.uniform(0.25, 2.0))
    k = unit_rows(rng, (n_a,))
    v = unit_rows(rng, (n_a,))
    _, o, _ = mesa_step(MesaState.zeros(n_a, n_a), k, v, k, 1.0, 1.0, lam, eps=1e-12)
    single = float(np.linalg.norm(o - v / (1 + lam)))
    Qm, _ = np.linalg.qr(rng.standard_normal((n_a, n_a)))
    keys = Qm.T
    vals = unit_rows(rng, (n_a, n_a))
    st = MesaState.zeros(n_a, n_a)
    for t in range(t_max):
        st, _, _ = mesa_step(st, keys[t], vals[t], keys[t], 1.0, 1.0, lam_small, eps=1e-12)
    worst = 0.0
    for t in range(t_max):
        x, _ = cg_solve(SpdOperator(st.H, np.full(n_a, lam_small)), keys[t], 1e-12, 200)
        worst = max(worst, float(np.linalg.norm(st.G @ x - vals[t])))
    return single, worst


def kmax_zero_deviation(rng, T=24, n_a=6, C=8):
    """``k_max = 0`` output against gated linear attention with diagonally scaled queries."""
    q, k, v, beta, gamma, lam = random_mesa_inputs(rng, (), T, n_a)
    O, _ = mesa_forward_chunked(q, k, v, beta, gamma, lam, C, 0.0, 0)
    H = np.zeros((n_a, n_a))
    G = np.zeros((n_a, n_a))
    ref = np.empty_like(O)
    for t in range(T):
        H = gamma[t] * H + beta[t] * np.outer(k[t], k[t])
        G = gamma[t] * G + beta[t] * np.outer(v[t], k[t])
        ref[t] = G @ (q[t] / (np.diag(H) + lam))
    return float(np.max(np.abs(O - ref)))


# baselines and gradient-step identities


def _tape_grad(build: Callable[[Tape, int], int], Phi: np.ndarray) -> np.ndarray:
    tape = Tape()
    p = tape.param("Phi", Phi)
    return tape.backward(build(tape, p))["Phi"]


def gla_step_deviation(rng, n_cases=50, n=6):
    worst = 0.0
    for _ in range(n_cases):
        Phi = rng.standard_normal((n, n))
        k, v = rng.standard_normal(n), rng.standard_normal(n)
        beta, gamma = rng.uniform(0.05, 1), rng.uniform(0, 1)
        c = (1 - gamma) / (2 * beta)

        def build(tape, p):
            hebb = tape.scale(tape.sum(tape.mul(p, tape.const(np.outer(v, k)))), c=-1.0)
            reg = tape.scale(tape.sum(tape.mul(p, p)), c=c)
            return tape.add(hebb, reg)

        dev = baselines.gla_gradient_step_check(Phi, k, v, beta, gamma, lambda P: _tape_grad(build, P))
        worst = max(worst, dev)
    return worst


def deltanet_step_deviation(rng, n_cases=50, n=6):
    worst = 0.0
    for _ in range(n_cases):
        G = rng.standard_normal((n, n))
        k = unit_rows(rng, (n,))
        v, q = rng.standard_normal(n), rng.standard_normal(n)
        beta = rng.uniform(0, 1)

        def build(tape, p):
            r = tape.sub(tape.const(v[:, None]), tape.matmul(p, tape.const(k[:, None])))
            return tape.scale(tape.sum(tape.mul(r, r)), c=0.5)

        step = G - beta * _tape_grad(build, G)
        st, _ = baselines.deltanet_step(baselines.LinearAttnState(G), k, v, q, beta)
        worst = max(worst, float(np.max(np.abs(st.G - step))))
    return worst


def baseline_rollout_deviation(rng, T=8, n=5):
    """Batched recurrences against the step functions and brute-force sums."""
    q = unit_rows(rng, (T, n))
    k = unit_rows(rng, (T, n))
    v = rng.standard_normal((T, n))
    beta = rng.uniform(0, 1, T)
    gamma = rng.uniform(0, 1, T)
    worst = 0.0
    zeta = np.zeros((T, T))
    for t in range(T):
        for s in range(t + 1):
            zeta[t, s] = np.prod(gamma[s + 1: t + 1])
    for kind in baselines.KINDS:
        b = np.ones(T) if kind == "mamba2" else beta
        g = np.ones(T) if kind == "deltanet" else gamma
        O, _ = baselines.recurrent_forward(kind, q, k, v, b, g)
        st = baselines.LinearAttnState.zeros(n, n, kind)
        G = np.zeros((n, n))
        z = np.zeros(n)
        for t in range(T):
            if kind == "mamba2":
                st, o = baselines.mamba2_step(st, k[t], v[t], q[t], g[t])
            elif kind == "gla":
                st, o = baselines.gla_step(st, k[t], v[t], q[t], b[t], g[t])
            elif kind == "deltanet":
                st, o = baselines.deltanet_step(st, k[t], v[t], q[t], b[t])
            elif kind == "gated_deltanet":
                st, o = baselines.gated_deltanet_step(st, k[t], v[t], q[t], b[t], g[t])
            else:
                st, o = baselines.mlstm_step(st, k[t], v[t], q[t], b[t], g[t])
            if kind in ("deltanet", "gated_deltanet"):
                G = g[t] * G @ (np.eye(n) - b[t] * np.outer(k[t], k[t])) + b[t] * np.outer(v[t], k[t])
                ref = G @ q[t]
            else:
                w = zeta[t, : t + 1] * b[: t + 1]
                G = (v[: t + 1] * w[:, None]).T @ k[: t + 1]
                ref = G @ q[t]
                if kind == "mlstm":
                    z = w @ k[: t + 1]
                    ref = ref / max(1.0, abs(z @ q[t]))
            worst = max(worst, float(np.max(np.abs(o - ref))), float(np.max(np.abs(O[t] - ref))))
    return worst


def baseline_grad_error(rng, T=6, n=4, h=1e-6):
    worst = 0.0
    for kind in baselines.KINDS:
        q, k, v = (rng.standard_normal((2, T, n)) for _ in range(3))
        beta = rng.uniform(0.2, 0.9, (2, T))
        gamma = rng.uniform(0.5, 0.99, (2, T))
        E = rng.standard_normal((2, T, n))
        args = [q, k, v, beta, gamma]
        _, saved = baselines.recurrent_forward(kind, *args)
        grads = baselines.recurrent_backward(saved, E, *args)
        for a, g in zip(args, grads):
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                lp = np.sum(E * baselines.recurrent_forward(kind, *args)[0])
                a[idx] = old - h
                lm = np.sum(E * baselines.recurrent_forward(kind, *args)[0])
                a[idx] = old
                num = (lp - lm) / (2 * h)
                worst = max(worst, abs(g[idx] - num) / max(abs(num), 1e-3))
    return worst


# recursive least squares oracles


def sherman_morrison_deviation(rng, T=20, n_a=6):
    k = unit_rows(rng, (T, n_a))
    v = rng.standard_normal((T, n_a))
    q = unit_rows(rng, (T, n_a))
    lam = 0.25 + rng.uniform(0, 1, n_a)
    ref = sherman_morrison_outputs(k, v, q, lam)
    O, _ = mesa_sequential(q, k, v, np.ones(T), np.ones(T), lam, eps=1e-12, k_max=200)
    return float(np.max(np.abs(O - ref)))


def newton_deviation(rng, n_cases=20):
    worst = 0.0
    for _ in range(n_cases):
        n_a = int(rng.integers(2, 9))
        t = int(rng.integers(1, 13))
        K = unit_rows(rng, (t, n_a))
        V = rng.standard_normal((t, n_a))
        lam = 0.25 + rng.uniform(0, 1, n_a)
        worst = max(worst, newton_identity_check(K, V, lam, t))
    return worst


# suites


def _suite_cg(rng):
    err, excess = cg_exact_termination(rng, 40)
    return [
        _check("cg vs direct solve (rel)", cg_direct_deviation(rng, 40), 1e-8),
        _check("cg eps=0 exact (rel)", err, 1e-9),
        _check("cg eps=0 iterations over n", excess, 0),
        _check("chunked cg vs per-step cg", cg_chunk_deviation(rng, 4), 1e-8),
        _check("condition estimate (rel)", condition_deviation(rng, 10), 0.05),
    ]


def _suite_mesa(rng):
    g, viol = optimality_check(rng, 4, 20)
    single, multi = one_shot_errors(rng)
    return [
        _check("chunked vs sequential", chunk_vs_sequential(rng, 6, 48), 1e-8),
        _check("objective gradient at optimum", g, 1e-7),
        _check("perturbations lowering objective", viol, 0),
        _check("one-shot retrieval", single, 1e-10),
        _check("orthogonal-key retrieval", multi, 2e-3),
        _check("k_max=0 vs scaled GLA", kmax_zero_deviation(rng), 1e-12),
    ]


def _suite_baselines(rng):
    return [
        _check("baseline recurrences vs brute force", baseline_rollout_deviation(rng), 1e-12),
        _check("GLA as gradient step", gla_step_deviation(rng, 20), 1e-12),
        _check("DeltaNet as gradient step", deltanet_step_deviation(rng, 20), 1e-12),
    ]


def _suite_grads(rng):
    return [
        _check("mesa backward vs finite differences", backward_fd_error(rng, 3), 1e-4),
        _check("baseline backward vs finite differences", baseline_grad_error(rng), 1e-4),
    ]


def _suite_app_f(rng):
    return [
        _check("Sherman-Morrison vs CG path", sherman_morrison_deviation(rng), 1e-8),
        _check("Newton-step identity", newton_deviation(rng), 1e-8),
    ]


SUITE_FNS = {"cg": _suite_cg, "mesa": _suite_mesa, "baselines": _suite_baselines,
             "grads": _suite_grads, "app_f": _suite_app_f}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    if name not in SUITE_FNS:
        raise KeyError(f"unknown suite {name!r}")
    return SUITE_FNS[name](make_rng(seed, f"verify:{name}"))
