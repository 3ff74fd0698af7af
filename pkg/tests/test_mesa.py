import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mesanet import linalg
from mesanet.cg import NotPositiveDefiniteError
from mesanet.mesa import (
    GAMMA_CAP,
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
    sherman_morrison_step,
)
from mesanet.mixers import mesa_mixer_forward, mixer_param_shapes, realized_gates


def unit(rng, shape):
    return linalg.l2_normalize(rng.standard_normal(shape))


def rollout_inputs(rng, T, n, lead=()):
    q = unit(rng, lead + (T, n))
    k = unit(rng, lead + (T, n))
    v = rng.standard_normal(lead + (T, n))
    beta = rng.uniform(0, 1, lead + (T,))
    gamma = rng.uniform(0.5, 1, lead + (T,))
    lam = 0.25 + rng.uniform(0, 1, lead + (n,))
    return q, k, v, beta, gamma, lam


def dense_states(k, v, beta, gamma):
    """Per-step ``G_t`` and ``H_t`` by direct recursion."""
    n_a, n_v = k.shape[1], v.shape[1]
    G, H = np.zeros((n_v, n_a)), np.zeros((n_a, n_a))
    Gs, Hs = [], []
    for t in range(k.shape[0]):
        G = gamma[t] * G + beta[t] * np.outer(v[t], k[t])
        H = gamma[t] * H + beta[t] * np.outer(k[t], k[t])
        Gs.append(G)
        Hs.append(H)
    return Gs, Hs


# recurrent step


def test_one_step_unit_query_returns_half_value():
    rng = np.random.default_rng(0)
    k = unit(rng, 5)
    v = rng.standard_normal(5)
    _, o, _ = mesa_step(MesaState.zeros(5, 5), k, v, k, 1.0, 1.0, np.ones(5))
    np.testing.assert_allclose(o, v / 2, atol=1e-12)


def test_zero_input_gate_keeps_state_empty():
    rng = np.random.default_rng(1)
    st_, o, _ = mesa_step(MesaState.zeros(4, 4), unit(rng, 4), rng.standard_normal(4), unit(rng, 4),
                          0.0, 0.9, np.ones(4))
    assert np.all(o == 0) and np.all(st_.G == 0) and np.all(st_.H == 0)


def test_steps_match_closed_form():
    rng = np.random.default_rng(2)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, 5, 6)
    state = MesaState.zeros(6, 6)
    for t in range(5):
        state, o, _ = mesa_step(state, k[t], v[t], q[t], beta[t], gamma[t], lam, eps=0.0, k_max=6)
        Phi = closed_form_phi(k[: t + 1], v[: t + 1], beta[: t + 1], gamma[: t + 1], lam)
        assert np.max(np.abs(o - Phi @ q[t])) <= 1e-8


def test_state_stays_symmetric_and_psd():
    rng = np.random.default_rng(3)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, 30, 6)
    state = MesaState.zeros(6, 6)
    for t in range(30):
        state, _, _ = mesa_step(state, k[t], v[t], q[t], beta[t], gamma[t], lam)
        assert np.max(np.abs(state.H - state.H.T)) <= 1e-10
        assert np.linalg.eigvalsh(state.H).min() >= -1e-8


def test_indefinite_system_raises():
    H = np.diag([10.0, 0.0])
    state = MesaState(np.zeros((2, 2)), H)
    with pytest.raises(NotPositiveDefiniteError):
        mesa_step(state, np.array([0.0, 1.0]), np.ones(2), np.array([1.0, 0.0]), 1.0, -1.0, np.ones(2))


# closed form and objective


def test_closed_form_single_pair():
    rng = np.random.default_rng(4)
    k = unit(rng, 4)
    v = rng.standard_normal(3)
    Phi = closed_form_phi(k[None], v[None], np.ones(1), np.ones(1), 0.3)
    np.testing.assert_allclose(Phi, np.outer(v, k) / 1.3, atol=1e-14)


def test_closed_form_zero_values():
    rng = np.random.default_rng(5)
    Phi = closed_form_phi(unit(rng, (4, 3)), np.zeros((4, 2)), np.ones(4), np.ones(4), 1.0)
    assert np.all(Phi == 0)
    with pytest.raises(ValueError):
        closed_form_phi(np.zeros((0, 3)), np.zeros((0, 3)), np.ones(0), np.ones(0), 1.0)


def test_closed_form_is_a_minimum():
    rng = np.random.default_rng(6)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, 12, 5)
    Phi = closed_form_phi(k, v, beta, gamma, lam)
    f0 = mesa_objective(Phi, k, v, beta, gamma, lam)
    for _ in range(100):
        d = rng.standard_normal(Phi.shape)
        d *= 1e-3 / np.linalg.norm(d)
        assert mesa_objective(Phi + d, k, v, beta, gamma, lam) >= f0
    assert np.max(np.abs(mesa_objective_grad(Phi, k, v, beta, gamma, lam))) <= 1e-10


def test_objective_examples():
    rng = np.random.default_rng(7)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, 6, 4)
    zero = np.zeros((4, 4))
    assert mesa_objective(zero, k, np.zeros_like(v), beta, gamma, lam) == 0.0
    T = 6
    w = np.array([np.prod(gamma[s + 1:]) * beta[s] for s in range(T)])
    assert mesa_objective(zero, k, v, beta, gamma, lam) == pytest.approx(0.5 * np.sum(w * np.sum(v * v, 1)))
    Phi = rng.standard_normal((4, 4))
    brute = 0.0
    for s in range(T):
        r = v[s] - Phi @ k[s]
        brute += 0.5 * np.prod(gamma[s + 1:]) * beta[s] * (r @ r)
    brute += 0.5 * np.trace(Phi @ np.diag(lam) @ Phi.T)
    assert mesa_objective(Phi, k, v, beta, gamma, lam) == pytest.approx(brute, rel=1e-12)


def test_implied_phi_is_optimal_at_every_step():
    rng = np.random.default_rng(8)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, 20, 6)
    Gs, Hs = dense_states(k, v, beta, gamma)
    for t in range(20):
        Phi = Gs[t] @ np.linalg.inv(Hs[t] + np.diag(lam))
        g = mesa_objective_grad(Phi, k[: t + 1], v[: t + 1], beta[: t + 1], gamma[: t + 1], lam)
        assert np.max(np.abs(g)) <= 1e-7


def test_one_shot_storage():
    rng = np.random.default_rng(9)
    k = unit(rng, 6)
    v = rng.standard_normal(6)
    errs = []
    for lam in (1.0, 0.1, 1e-2, 1e-3, 1e-4):
        _, o, _ = mesa_step(MesaState.zeros(6, 6), k, v, k, 1.0, 1.0, np.full(6, lam), eps=0.0, k_max=6)
        np.testing.assert_allclose(o, v / (1 + lam), rtol=1e-12)
        errs.append(np.linalg.norm(o - v))
    assert errs == sorted(errs, reverse=True) and errs[-1] < 1e-3


# chunked forward


def test_single_chunk_without_gates_matches_steps():
    rng = np.random.default_rng(10)
    q, k, v, _, _, lam = rollout_inputs(rng, 8, 5)
    ones = np.ones(8)
    O, _ = mesa_forward_chunked(q, k, v, ones, ones, lam, 8)
    S, _ = mesa_sequential(q, k, v, ones, ones, lam)
    assert np.max(np.abs(O - S)) <= 1e-10


def test_chunked_matches_sequential_with_gates():
    rng = np.random.default_rng(11)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, 64, 6, (2,))
    O, saved = mesa_forward_chunked(q, k, v, beta, gamma, lam, 16)
    S, iters = mesa_sequential(q, k, v, beta, gamma, lam)
    assert np.max(np.abs(O - S)) <= 1e-8
    assert saved.iters.shape == (2, 64)
    _, Hs = dense_states(k[0], v[0], beta[0], gamma[0])
    assert np.max(np.abs(saved.final.H[0] - Hs[-1])) <= 1e-12
    for H in saved.H_starts:
        assert np.max(np.abs(H - np.swapaxes(H, -1, -2))) <= 1e-10


def test_zero_cg_steps_is_diagonally_scaled_gla():
    rng = np.random.default_rng(12)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, 20, 5)
    O, _ = mesa_forward_chunked(q, k, v, beta, gamma, lam, 8, eps=0.0, k_max=0)
    Gs, Hs = dense_states(k, v, beta, gamma)
    ref = np.stack([Gs[t] @ (q[t] / (np.diag(Hs[t]) + lam)) for t in range(20)])
    np.testing.assert_allclose(O, ref, atol=1e-12)
    Oq, _ = mesa_forward_chunked(q, k, v, beta, gamma, lam, 8, eps=0.0, k_max=0, init="query")
    np.testing.assert_allclose(Oq, np.stack([Gs[t] @ q[t] for t in range(20)]), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8, 16, 32]), st.sampled_from([5, 32]))
def test_chunk_size_invariance(seed, C, T):
    rng = np.random.default_rng(seed)
    q, k, v, beta, gamma, lam = rollout_inputs(rng, T, 4)
    O, _ = mesa_forward_chunked(q, k, v, beta, gamma, lam, C)
    ref, _ = mesa_forward_chunked(q, k, v, beta, gamma, lam, T)
    assert np.max(np.abs(O - ref)) <= 1e-8


def test_bad_chunk_size():
    rng = np.random.default_rng(13)
    with pytest.raises(ValueError):
        mesa_forward_chunked(*rollout_inputs(rng, 4, 3), 0)


# backward


def fd_grads(args, E, C, h=1e-6):
    names = ("q", "k", "v", "beta", "gamma", "lam")

    def loss(a):
        O, _ = mesa_forward_chunked(*a, C)
        return float(np.sum(O * E))

    out = {}
    for i, name in enumerate(names):
        g = np.zeros_like(args[i])
        for idx in np.ndindex(args[i].shape):
            a = [x.copy() for x in args]
            a[i][idx] += h
            up = loss(a)
            a[i][idx] -= 2 * h
            g[idx] = (up - loss(a)) / (2 * h)
        out[name] = g
    return out


def test_zero_upstream_error_gives_zero_gradients():
    rng = np.random.default_rng(14)
    args = rollout_inputs(rng, 6, 4)
    _, saved = mesa_forward_chunked(*args, 4)
    g = mesa_backward_chunked(saved, np.zeros((6, 4)))
    for name in ("q", "k", "v", "beta", "gamma", "lam"):
        assert np.all(g[name] == 0)


@pytest.mark.parametrize("T,n,C", [(3, 4, 3), (16, 8, 4), (11, 5, 4)])
def test_backward_matches_finite_differences(T, n, C):
    rng = np.random.default_rng(15 + T)
    args = rollout_inputs(rng, T, n)
    E = rng.standard_normal((T, n))
    _, saved = mesa_forward_chunked(*args, C)
    g = mesa_backward_chunked(saved, E)
    num = fd_grads(args, E, C)
    for name, ref in num.items():
        err = np.max(np.abs(g[name] - ref) / np.maximum(np.abs(ref), 1e-3))
        assert err <= 1e-4, name


def test_gradients_do_not_depend_on_chunk_size():
    rng = np.random.default_rng(16)
    args = rollout_inputs(rng, 32, 6, (2,))
    E = rng.standard_normal((2, 32, 6))
    g8 = mesa_backward_chunked(mesa_forward_chunked(*args, 8)[1], E)
    g32 = mesa_backward_chunked(mesa_forward_chunked(*args, 32)[1], E)
    for name in ("q", "k", "v", "beta", "gamma", "lam"):
        assert np.max(np.abs(g8[name] - g32[name])) <= 1e-8, name


# recursive least squares and Newton form


def test_sherman_morrison_examples():
    R = sherman_morrison_step(np.eye(3), np.array([1.0, 0, 0]))
    np.testing.assert_allclose(R, np.diag([0.5, 1.0, 1.0]))
    rng = np.random.default_rng(17)
    lam = 0.5 + rng.uniform(0, 1, 4)
    k1, k2 = unit(rng, 4), unit(rng, 4)
    R = sherman_morrison_step(sherman_morrison_step(np.diag(1 / lam), k1), k2)
    ref = np.linalg.inv(np.diag(lam) + np.outer(k1, k1) + np.outer(k2, k2))
    np.testing.assert_allclose(R, ref, atol=1e-12)
    with pytest.raises(ValueError):
        sherman_morrison_step(-np.eye(2), np.array([1.0, 0.0]))


def test_sherman_morrison_matches_cg_path():
    rng = np.random.default_rng(18)
    q, k, v, _, _, lam = rollout_inputs(rng, 20, 6)
    ones = np.ones(20)
    ref = sherman_morrison_outputs(k, v, q, lam)
    state = MesaState.zeros(6, 6)
    for t in range(20):
        state, o, _ = mesa_step(state, k[t], v[t], q[t], 1.0, 1.0, lam, eps=1e-12)
        assert np.max(np.abs(o - ref[t])) <= 1e-8
    O, _ = mesa_forward_chunked(q, k, v, ones, ones, lam, 8)
    assert np.max(np.abs(O - ref)) <= 1e-8


def test_newton_identity():
    rng = np.random.default_rng(19)
    K, V = unit(rng, (8, 6)), rng.standard_normal((8, 6))
    lam = 0.25 + rng.uniform(0, 1, 6)
    assert newton_identity_check(K, V, lam, 1) <= 1e-10
    assert newton_identity_check(K, V, lam, 8) <= 1e-8
    assert newton_identity_check(K, np.zeros((8, 6)), lam, 5) == 0.0


# multi-head mixer


def mixer_params(rng, n_e, H, n_a):
    p = {name: rng.standard_normal(shape) * 0.5 for name, shape in mixer_param_shapes("mesa", n_e, H, n_a).items()}
    for s in "qkv":
        p[f"conv_{s}"][:, 0] += 1.0
    return p


def straight_line_mixer(x, p, H, mode, floor):
    """Loop-by-loop reference for one sequence."""
    T, n_e = x.shape
    n_a = p["lam_raw"].shape[1]
    sig = lambda z: 1 / (1 + np.exp(-z))
    out = np.zeros((T, n_e))
    for h in range(H):
        cols = slice(h * n_a, (h + 1) * n_a)
        feats = {}
        for s in "qkv":
            raw = x @ p["W" + s][:, cols]
            b = p[f"conv_{s}"][h]
            y = np.zeros_like(raw)
            for t in range(T):
                for i in range(4):
                    if t - i >= 0:
                        y[t] += b[i] * raw[t - i]
            feats[s] = y * sig(y)
        lam = floor + np.log1p(np.exp(p["lam_raw"][h]))
        G = np.zeros((n_a, n_a))
        Hm = np.zeros((n_a, n_a))
        for t in range(T):
            q = feats["q"][t] / np.linalg.norm(feats["q"][t])
            k = feats["k"][t] / np.linalg.norm(feats["k"][t])
            beta = sig(x[t] @ p["Wbeta"][:, h] + p["bbeta"][h])
            s_ = sig(x[t] @ p["Wgamma"][:, h] + p["bgamma"][h])
            gamma = 2 * s_ - 1 if mode == "state_tracking" else min(s_ * (1 - (1 - 0.9975) * beta ** 2), 0.9975)
            G = gamma * G + beta * np.outer(feats["v"][t], k)
            Hm = gamma * Hm + beta * np.outer(k, k)
            o = G @ np.linalg.solve(Hm + np.diag(lam), q)
            o = o / np.sqrt(np.mean(o * o) + linalg.RMS_EPS) * p["norm"][h]
            out[t] += o @ p["Wo"][cols]
    return out


@pytest.mark.parametrize("mode,floor", [("standard", 0.25), ("state_tracking", 49.0)])
def test_mixer_matches_straight_line_reference(mode, floor):
    rng = np.random.default_rng(20)
    p = mixer_params(rng, 8, 2, 4)
    x = rng.standard_normal((2, 12, 8))
    out = mesa_mixer_forward(x, p, 2, mode, floor, chunk=5)
    for b in range(2):
        ref = straight_line_mixer(x[b], p, 2, mode, floor)
        assert np.max(np.abs(out[b] - ref)) <= 1e-8


def test_mixer_zero_value_projection_gives_zero():
    rng = np.random.default_rng(21)
    p = mixer_params(rng, 8, 2, 4)
    p["Wv"][:] = 0.0
    out = mesa_mixer_forward(rng.standard_normal((1, 12, 8)), p, 2)
    assert np.all(out == 0)


def test_mixer_closed_input_gate_gives_zero():
    rng = np.random.default_rng(22)
    p = mixer_params(rng, 8, 2, 4)
    p["Wbeta"][:] = 0.0
    p["bbeta"][:] = -1e4
    out = mesa_mixer_forward(rng.standard_normal((1, 12, 8)), p, 2)
    assert np.all(out == 0)


def test_realized_gates_respect_cap_and_modes():
    rng = np.random.default_rng(23)
    p = mixer_params(rng, 8, 3, 4)
    p["bgamma"][:] = 20.0
    p["bbeta"][:] = 0.0
    x = rng.standard_normal((4, 50, 8)) * 3
    beta, gamma = realized_gates(x, p, "standard")
    assert beta.shape == gamma.shape == (4, 3, 50)
    assert np.all((beta >= 0) & (beta <= 1))
    assert np.all((gamma >= 0) & (gamma <= GAMMA_CAP))
    p["bgamma"][:] = 0.0
    _, g2 = realized_gates(x, p, "state_tracking")
    assert np.all((g2 > -1) & (g2 < 1)) and g2.min() < 0
    lam = 0.25 + linalg.softplus(rng.standard_normal((3, 4)) * 20)
    assert np.all(lam >= 0.25)
