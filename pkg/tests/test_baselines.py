import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mesanet import linalg
from mesanet.autodiff import Tape
from mesanet.baselines import (
    KINDS,
    LinearAttnState,
    deltanet_step,
    gated_deltanet_step,
    gla_gradient_step_check,
    gla_step,
    mamba2_step,
    mlstm_step,
    recurrent_backward,
    recurrent_forward,
    softmax_attention,
    softmax_backward,
    softmax_forward,
)
from mesanet.mixers import MIXER_KINDS, mixer_param_shapes


def unit(rng, shape):
    return linalg.l2_normalize(rng.standard_normal(shape))


def test_gla_examples():
    rng = np.random.default_rng(0)
    k, v = unit(rng, 4), rng.standard_normal(3)
    _, o = gla_step(LinearAttnState.zeros(3, 4), k, v, k, 1.0, 0.7)
    np.testing.assert_allclose(o, v, atol=1e-14)
    st_ = LinearAttnState(rng.standard_normal((3, 4)))
    new, _ = gla_step(st_, k, v, k, 0.4, 0.0)
    np.testing.assert_array_equal(new.G, 0.4 * np.outer(v, k))


def test_gla_rollout_matches_direct_sum():
    rng = np.random.default_rng(1)
    T = 6
    K, V, Q = unit(rng, (T, 4)), rng.standard_normal((T, 3)), unit(rng, (T, 4))
    beta, gamma = rng.uniform(0, 1, T), rng.uniform(0, 1, T)
    s = LinearAttnState.zeros(3, 4)
    for t in range(T):
        s, o = gla_step(s, K[t], V[t], Q[t], beta[t], gamma[t])
        ref = sum(np.prod(gamma[i + 1: t + 1]) * beta[i] * V[i] * (K[i] @ Q[t]) for i in range(t + 1))
        np.testing.assert_allclose(o, ref, atol=1e-12)


def test_mamba2_examples():
    rng = np.random.default_rng(2)
    k, v, q = unit(rng, 4), rng.standard_normal(4), unit(rng, 4)
    _, o = mamba2_step(LinearAttnState.zeros(4, 4), k, v, q, 0.5)
    np.testing.assert_allclose(o, v * (k @ q), atol=1e-14)
    K, V = unit(rng, (3, 4)), rng.standard_normal((3, 4))
    s = LinearAttnState.zeros(4, 4)
    for t in range(3):
        s, _ = mamba2_step(s, K[t], V[t], q, 1.0)
    np.testing.assert_allclose(s.G, V.T @ K, atol=1e-14)
    gamma = rng.uniform(0, 1, 5)
    K, V, Q = unit(rng, (5, 4)), rng.standard_normal((5, 4)), unit(rng, (5, 4))
    s = LinearAttnState.zeros(4, 4)
    for t in range(5):
        s, o = mamba2_step(s, K[t], V[t], Q[t], gamma[t])
        ref = sum(np.prod(gamma[i + 1: t + 1]) * V[i] * (K[i] @ Q[t]) for i in range(t + 1))
        np.testing.assert_allclose(o, ref, atol=1e-12)


def test_deltanet_examples():
    rng = np.random.default_rng(3)
    k, v, v2 = unit(rng, 5), rng.standard_normal(5), rng.standard_normal(5)
    s, _ = deltanet_step(LinearAttnState.zeros(5, 5), k, v, k, 0.3)
    np.testing.assert_allclose(s.G, 0.3 * np.outer(v, k))
    s, o = deltanet_step(LinearAttnState.zeros(5, 5), k, v, k, 1.0)
    assert np.linalg.norm(o - v) <= 1e-14
    s, o = deltanet_step(s, k, v2, k, 1.0)
    np.testing.assert_allclose(o, v2, atol=1e-14)


def test_deltanet_is_a_gradient_step():
    rng = np.random.default_rng(4)
    for _ in range(50):
        G = rng.standard_normal((4, 5))
        k, v, beta = unit(rng, 5), rng.standard_normal(4), rng.uniform(0, 1)
        grad = -np.outer(v - G @ k, k)
        s, _ = deltanet_step(LinearAttnState(G), k, v, k, beta)
        assert np.max(np.abs(s.G - (G - beta * grad))) <= 1e-12


def test_deltanet_gradient_from_tape():
    rng = np.random.default_rng(5)
    G = rng.standard_normal((3, 4))
    k, v, beta = unit(rng, 4), rng.standard_normal(3), 0.6
    tape = Tape()
    P = tape.param("Phi", G)
    r = tape.sub(tape.const(v[None]), tape.matmul(tape.const(k[None]), tape.transpose(P, axes=(1, 0))))
    loss = tape.scale(tape.sum(tape.mul(r, r)), c=0.5)
    grad = tape.backward(loss)["Phi"]
    s, _ = deltanet_step(LinearAttnState(G), k, v, k, beta)
    assert np.max(np.abs(s.G - (G - beta * grad))) <= 1e-12


def test_gated_deltanet_examples():
    rng = np.random.default_rng(6)
    G = rng.standard_normal((3, 4))
    k, v, q = unit(rng, 4), rng.standard_normal(3), unit(rng, 4)
    a, oa = gated_deltanet_step(LinearAttnState(G), k, v, q, 0.7, 1.0)
    b, ob = deltanet_step(LinearAttnState(G), k, v, q, 0.7)
    np.testing.assert_array_equal(a.G, b.G)
    c, _ = gated_deltanet_step(LinearAttnState(G), k, v, q, 0.0, 0.6)
    np.testing.assert_allclose(c.G, 0.6 * G)
    d, od = gated_deltanet_step(LinearAttnState(G), k, v, q, 0.7, 0.6)
    ref = G @ (0.6 * (np.eye(4) - 0.7 * np.outer(k, k))) + 0.7 * np.outer(v, k)
    np.testing.assert_allclose(d.G, ref, atol=1e-14)
    np.testing.assert_allclose(od, ref @ q, atol=1e-14)


def test_mlstm_examples():
    rng = np.random.default_rng(7)
    k, v = unit(rng, 4), rng.standard_normal(4)
    _, o = mlstm_step(LinearAttnState.zeros(4, 4, "mlstm"), k, v, k, 1.0, 0.5)
    np.testing.assert_allclose(o, v, atol=1e-14)
    _, o = mlstm_step(LinearAttnState.zeros(4, 4, "mlstm"), k, v, 2 * k, 1.0, 0.5)
    np.testing.assert_allclose(o, v, atol=1e-14)
    T = 6
    K, V, Q = unit(rng, (T, 4)), rng.standard_normal((T, 4)), rng.standard_normal((T, 4)) * 3
    beta, gamma = rng.uniform(0, 1, T), rng.uniform(0, 1, T)
    s = LinearAttnState.zeros(4, 4, "mlstm")
    for t in range(T):
        s, o = mlstm_step(s, K[t], V[t], Q[t], beta[t], gamma[t])
        w = [np.prod(gamma[i + 1: t + 1]) * beta[i] for i in range(t + 1)]
        G = sum(w[i] * np.outer(V[i], K[i]) for i in range(t + 1))
        z = sum(w[i] * K[i] for i in range(t + 1))
        np.testing.assert_allclose(o, G @ Q[t] / max(1.0, abs(z @ Q[t])), atol=1e-12)
    assert LinearAttnState.zeros(4, 4).z is None


def test_softmax_attention_examples():
    rng = np.random.default_rng(8)
    V = rng.standard_normal((1, 3))
    np.testing.assert_allclose(softmax_attention(rng.standard_normal((1, 3)) * 50, V, rng.standard_normal(3)), V[0])
    K = np.tile(rng.standard_normal(3), (4, 1))
    V = rng.standard_normal((4, 3))
    np.testing.assert_allclose(softmax_attention(K, V, rng.standard_normal(3)), V.mean(0), atol=1e-14)
    K, V, q = rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    w = np.exp(K @ q)
    np.testing.assert_allclose(softmax_attention(K, V, q), (w / w.sum()) @ V, atol=1e-14)


def test_gla_gradient_step_identity():
    rng = np.random.default_rng(9)
    k, v = unit(rng, 4), rng.standard_normal(3)
    assert gla_gradient_step_check(np.zeros((3, 4)), k, v, 0.5, 0.8) <= 1e-12
    assert gla_gradient_step_check(rng.standard_normal((3, 4)), k, v, 0.5, 1.0) <= 1e-12
    for _ in range(50):
        Phi = rng.standard_normal((3, 4))
        beta, gamma = rng.uniform(0.05, 1), rng.uniform(0, 1)
        assert gla_gradient_step_check(Phi, unit(rng, 4), rng.standard_normal(3), beta, gamma) <= 1e-12


def test_gla_gradient_from_tape():
    rng = np.random.default_rng(10)
    k, v = unit(rng, 4), rng.standard_normal(3)
    beta, gamma = 0.4, 0.7

    def grad_fn(Phi):
        tape = Tape()
        P = tape.param("Phi", Phi)
        hebb = tape.sum(tape.mul(P, tape.const(np.outer(v, k))))
        reg = tape.sum(tape.mul(P, P))
        loss = tape.add(tape.scale(hebb, c=-1.0), tape.scale(reg, c=(1 - gamma) / (2 * beta)))
        return tape.backward(loss)["Phi"]

    assert gla_gradient_step_check(rng.standard_normal((3, 4)), k, v, beta, gamma, grad_fn) <= 1e-12


STEPS = {
    "gla": lambda s, k, v, q, b, g: gla_step(s, k, v, q, b, g),
    "mamba2": lambda s, k, v, q, b, g: mamba2_step(s, k, v, q, g),
    "deltanet": lambda s, k, v, q, b, g: deltanet_step(s, k, v, q, b),
    "gated_deltanet": gated_deltanet_step,
    "mlstm": mlstm_step,
}


@pytest.mark.parametrize("kind", KINDS)
def test_batched_rollout_matches_steps(kind):
    rng = np.random.default_rng(11)
    T = 8
    q, k, v = unit(rng, (2, T, 4)), unit(rng, (2, T, 4)), rng.standard_normal((2, T, 4))
    beta, gamma = rng.uniform(0, 1, (2, T)), rng.uniform(0, 1, (2, T))
    if kind == "mamba2":
        beta = np.ones((2, T))
    if kind == "deltanet":
        gamma = np.ones((2, T))
    O, _ = recurrent_forward(kind, q, k, v, beta, gamma)
    for b in range(2):
        s = LinearAttnState.zeros(4, 4, kind)
        for t in range(T):
            s, o = STEPS[kind](s, k[b, t], v[b, t], q[b, t], beta[b, t], gamma[b, t])
            np.testing.assert_allclose(O[b, t], o, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_recurrent_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(12)
    T = 5
    args = [unit(rng, (T, 3)) * (2.0 if kind == "mlstm" else 1.0), unit(rng, (T, 3)),
            rng.standard_normal((T, 3)), rng.uniform(0.2, 1, T), rng.uniform(0.2, 1, T)]
    E = rng.standard_normal((T, 3))
    O, saved = recurrent_forward(kind, *args)
    grads = recurrent_backward(saved, E, *args)
    h = 1e-6
    for i, g in enumerate(grads):
        num = np.zeros_like(args[i])
        for idx in np.ndindex(args[i].shape):
            a = [x.copy() for x in args]
            a[i][idx] += h
            up = np.sum(recurrent_forward(kind, *a)[0] * E)
            a[i][idx] -= 2 * h
            num[idx] = (up - np.sum(recurrent_forward(kind, *a)[0] * E)) / (2 * h)
        assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-3)) <= 1e-5


def test_softmax_forward_and_backward():
    rng = np.random.default_rng(13)
    q, k, v = (rng.standard_normal((6, 3)) for _ in range(3))
    O, P = softmax_forward(q, k, v, 0.5)
    for t in range(6):
        np.testing.assert_allclose(O[t], softmax_attention(k[: t + 1] * 0.5, v[: t + 1], q[t]), atol=1e-14)
    E = rng.standard_normal((6, 3))
    grads = softmax_backward(P, E, q, k, v, 0.5)
    h = 1e-6
    args = [q, k, v]
    for i, g in enumerate(grads):
        num = np.zeros_like(args[i])
        for idx in np.ndindex(args[i].shape):
            a = [x.copy() for x in args]
            a[i][idx] += h
            up = np.sum(softmax_forward(*a, 0.5)[0] * E)
            a[i][idx] -= 2 * h
            num[idx] = (up - np.sum(softmax_forward(*a, 0.5)[0] * E)) / (2 * h)
        np.testing.assert_allclose(g, num, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(KINDS))
def test_baseline_outputs_are_causal(seed, kind):
    rng = np.random.default_rng(seed)
    T = 7
    args = [unit(rng, (T, 3)), unit(rng, (T, 3)), rng.standard_normal((T, 3)),
            rng.uniform(0, 1, T), rng.uniform(0, 1, T)]
    O, _ = recurrent_forward(kind, *args)
    t0 = int(rng.integers(0, T))
    args[2] = args[2].copy()
    args[2][t0] += 1.0
    O2, _ = recurrent_forward(kind, *args)
    assert np.array_equal(O[:t0], O2[:t0])


def test_shared_feature_pipeline():
    ref = mixer_param_shapes("mesa", 16, 2, 8)
    shared = ("Wq", "Wk", "Wv", "conv_q", "conv_k", "conv_v", "norm", "Wo")
    for kind in MIXER_KINDS:
        if kind == "softmax":
            continue
        shapes = mixer_param_shapes(kind, 16, 2, 8)
        for name in shared:
            assert shapes[name] == ref[name]
    with pytest.raises(ValueError):
        recurrent_forward("hawk", *(np.zeros((2, 2)),) * 3, np.zeros(2), np.zeros(2))
