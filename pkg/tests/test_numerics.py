import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenedialog import _kernels
from scenedialog import numerics as nx

TOL = 1e-4
INSTANCES = 20


def projection_loss(out, R):
    """Scalar objective sum(out * R) with a fixed random R: its gradient is R."""
    return float(np.sum(out * R))


# ---------------------------------------------------------------------------
# Layer gradient checks: 20 random small instances each
# ---------------------------------------------------------------------------

def check_affine(rng):
    N, D, M = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
    x, W, b = rng.normal(size=(N, D)), rng.normal(size=(M, D)), rng.normal(size=M)
    R = rng.normal(size=(N, M))
    loss = lambda: projection_loss(nx.affine_forward(x, W, b)[0], R)
    out, cache = nx.affine_forward(x, W, b)
    dx, dW, db = nx.affine_backward(R, cache)
    return nx.gradient_check(loss, {"x": x, "W": W, "b": b}, {"x": dx, "W": dW, "b": db})


def check_lstm(rng, kernels=None):
    T, D, H = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    p = nx.LstmParams.init(D, H, rng)
    p.Wx[:] = rng.normal(scale=0.5, size=p.Wx.shape)
    p.Wh[:] = rng.normal(scale=0.5, size=p.Wh.shape)
    p.b[:] = rng.normal(scale=0.5, size=p.b.shape)
    xs, h0, c0 = rng.normal(size=(T, D)), rng.normal(size=H), rng.normal(size=H)
    R, Rc = rng.normal(size=(T, H)), rng.normal(size=H)

    def loss():
        out, tape = nx.lstm_forward(p, xs, h0, c0, kernels)
        return projection_loss(out, R) + projection_loss(tape.cs[-1], Rc)

    _, tape = nx.lstm_forward(p, xs, h0, c0, kernels)
    g, dxs, dh0, dc0 = nx.lstm_backward(tape, R, dc_last=Rc)
    arrays = {"Wx": p.Wx, "Wh": p.Wh, "b": p.b, "x": xs, "h0": h0, "c0": c0}
    analytic = {"Wx": g.Wx, "Wh": g.Wh, "b": g.b, "x": dxs, "h0": dh0, "c0": dc0}
    return nx.gradient_check(loss, arrays, analytic)


def check_additive_attention(rng):
    S, H, Hq = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    q, m = rng.normal(size=Hq), rng.normal(size=(S, H))
    Wq, Wm, v = rng.normal(size=(H, Hq)), rng.normal(size=(H, H)), rng.normal(size=H)
    R, Rw = rng.normal(size=H), rng.normal(size=S)

    def loss():
        ctx, w, _ = nx.additive_attention_forward(q, m, Wq, Wm, v)
        return projection_loss(ctx, R) + projection_loss(w, Rw)

    _, _, cache = nx.additive_attention_forward(q, m, Wq, Wm, v)
    dq, dm, dWq, dWm, dv = nx.additive_attention_backward(R, cache, dweights=Rw)
    return nx.gradient_check(loss, {"q": q, "m": m, "Wq": Wq, "Wm": Wm, "v": v},
                             {"q": dq, "m": dm, "Wq": dWq, "Wm": dWm, "v": dv})


def check_dot_attention(rng):
    S, H = rng.integers(1, 5), rng.integers(1, 5)
    q, m, R = rng.normal(size=H), rng.normal(size=(S, H)), rng.normal(size=H)
    loss = lambda: projection_loss(nx.dot_attention_forward(q, m)[0], R)
    _, _, cache = nx.dot_attention_forward(q, m)
    dq, dm = nx.dot_attention_backward(R, cache)
    return nx.gradient_check(loss, {"q": q, "m": m}, {"q": dq, "m": dm})


def check_conv1d(rng):
    N, C, F, K = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    stride = int(rng.integers(1, 4))
    L = int(K + stride * rng.integers(0, 4) + rng.integers(0, stride))
    x, W, b = rng.normal(size=(N, C, L)), rng.normal(size=(F, C, K)), rng.normal(size=F)
    out, cache = nx.conv1d_forward(x, W, b, stride)
    R = rng.normal(size=out.shape)
    loss = lambda: projection_loss(nx.conv1d_forward(x, W, b, stride)[0], R)
    dx, dW, db = nx.conv1d_backward(R, cache)
    return nx.gradient_check(loss, {"x": x, "W": W, "b": b}, {"x": dx, "W": dW, "b": db})


def check_embedding(rng):
    V, E, T = rng.integers(2, 6), rng.integers(1, 4), rng.integers(1, 6)
    table, ids = rng.normal(size=(V, E)), rng.integers(0, V, size=T)
    R = rng.normal(size=(T, E))
    loss = lambda: projection_loss(nx.embedding_forward(table, ids)[0], R)
    _, cache = nx.embedding_forward(table, ids)
    return nx.gradient_check(loss, {"table": table}, {"table": nx.embedding_backward(R, cache)})


def check_topic_projection(rng):
    # topic embedding: e = theta @ P with P of shape (topic_dim, embed_dim)
    K, E = rng.integers(2, 10), rng.integers(1, 5)
    theta, P = rng.dirichlet(np.ones(K)), rng.normal(size=(K, E))
    R = rng.normal(size=E)
    loss = lambda: projection_loss(nx.affine_forward(theta, P.T)[0], R)
    _, cache = nx.affine_forward(theta, P.T)
    dtheta, dPT, _ = nx.affine_backward(R, cache)
    return nx.gradient_check(loss, {"theta": theta, "P": P}, {"theta": dtheta, "P": dPT.T})


def check_relu_pool(rng):
    N, C, L = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 5)
    x = rng.normal(size=(N, C, L))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    R = rng.normal(size=(N, C))

    def loss():
        return projection_loss(nx.global_avg_pool_forward(nx.relu_forward(x)[0])[0], R)

    r, rc = nx.relu_forward(x)
    _, pc = nx.global_avg_pool_forward(r)
    dx = nx.relu_backward(nx.global_avg_pool_backward(R, pc), rc)
    return nx.gradient_check(loss, {"x": x}, {"x": dx})


LAYER_CHECKS = {
    "affine": check_affine,
    "lstm": check_lstm,
    "additive_attention": check_additive_attention,
    "dot_attention": check_dot_attention,
    "conv1d": check_conv1d,
    "embedding": check_embedding,
    "topic_projection": check_topic_projection,
    "relu_pool": check_relu_pool,
}


@pytest.mark.parametrize("name", sorted(LAYER_CHECKS))
def test_layer_gradients(name):
    rng = np.random.default_rng(sorted(LAYER_CHECKS).index(name))
    worst = 0.0
    for _ in range(INSTANCES):
        errs = LAYER_CHECKS[name](rng)
        worst = max(worst, *errs.values())
    assert worst < TOL, (name, worst)


@pytest.mark.parametrize("backend", _kernels.available_backends())
def test_lstm_gradients_per_backend(backend):
    rng = np.random.default_rng(7)
    k = _kernels.get_backend(backend)
    for _ in range(INSTANCES):
        assert max(check_lstm(rng, k).values()) < TOL


# ---------------------------------------------------------------------------
# LSTM forward oracles
# ---------------------------------------------------------------------------

def scalar_lstm(wx, wh, b, x, h, c):
    """Hand-written H = D = 1 LSTM step with math-module functions."""
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))
    pre = [wx[k] * x + wh[k] * h + b[k] for k in range(4)]
    i, f, g, o = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
    c_new = f * c + i * g
    return o * math.tanh(c_new), c_new


@pytest.mark.parametrize("backend", _kernels.available_backends())
def test_lstm_step_matches_scalar_oracle(backend):
    rng = np.random.default_rng(11)
    k = _kernels.get_backend(backend)
    for _ in range(20):
        wx, wh, b = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
        x, h, c = rng.normal(size=3)
        p = nx.LstmParams(wx.reshape(4, 1), wh.reshape(4, 1), b.copy())
        hn, cn, _ = nx.lstm_step(p, np.array([x]), np.array([h]), np.array([c]), k)
        eh, ec = scalar_lstm(wx, wh, b, x, h, c)
        assert abs(hn[0] - eh) < 1e-12 and abs(cn[0] - ec) < 1e-12


def test_lstm_forward_chains_steps():
    rng = np.random.default_rng(3)
    p = nx.LstmParams.init(3, 4, rng)
    xs = rng.normal(size=(5, 3))
    out, tape = nx.lstm_forward(p, xs)
    h, c = np.zeros(4), np.zeros(4)
    for t in range(5):
        h, c, _ = nx.lstm_step(p, xs[t], h, c)
        np.testing.assert_array_equal(out[t], h)
    np.testing.assert_array_equal(tape.cs[-1], c)


@pytest.mark.skipif(not _kernels.COMPILED_AVAILABLE, reason="compiled kernels not built")
def test_lstm_backends_agree():
    rng = np.random.default_rng(5)
    p = nx.LstmParams.init(6, 7, rng)
    xs = rng.normal(size=(9, 6))
    outs = [nx.lstm_forward(p, xs, kernels=_kernels.get_backend(n)) for n in ("cython", "python")]
    np.testing.assert_allclose(outs[0][0], outs[1][0], rtol=0, atol=1e-13)
    dout = rng.normal(size=(9, 7))
    grads = [nx.lstm_backward(o[1], dout) for o in outs]
    for a, b in zip(grads[0][0].__dict__.values(), grads[1][0].__dict__.values()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_lstm_init_and_validation():
    rng = np.random.default_rng(0)
    p = nx.LstmParams.init(3, 2, rng)
    assert np.abs(p.Wx).max() <= nx.INIT_SCALE and np.abs(p.Wh).max() <= nx.INIT_SCALE
    np.testing.assert_array_equal(p.b, [0, 0, 1, 1, 0, 0, 0, 0])
    with pytest.raises(ValueError, match="width"):
        nx.lstm_forward(p, np.zeros((2, 4)))
    with pytest.raises(ValueError, match="non-empty"):
        nx.lstm_forward(p, np.zeros((0, 3)))
    with pytest.raises(ValueError, match="h0"):
        nx.lstm_forward(p, np.zeros((1, 3)), h0=np.zeros(3))


def test_sigmoid_stable_at_extremes():
    s = nx.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


# ---------------------------------------------------------------------------
# Attention, loss, layers
# ---------------------------------------------------------------------------

def test_attention_singleton_and_identical_slots():
    rng = np.random.default_rng(0)
    H = 3
    Wq, Wm, v = rng.normal(size=(H, H)), rng.normal(size=(H, H)), rng.normal(size=H)
    slot = rng.normal(size=H)
    ctx, w, _ = nx.additive_attention_forward(rng.normal(size=H), slot[None], Wq, Wm, v)
    np.testing.assert_array_equal(w, [1.0])
    np.testing.assert_array_equal(ctx, slot)
    ctx, w, _ = nx.additive_attention_forward(rng.normal(size=H), np.tile(slot, (4, 1)), Wq, Wm, v)
    np.testing.assert_allclose(w, 0.25, atol=1e-15)
    np.testing.assert_allclose(ctx, slot, atol=1e-15)
    with pytest.raises(ValueError, match="empty"):
        nx.additive_attention_forward(slot, np.zeros((0, H)), Wq, Wm, v)


def test_attention_two_slot_scalar_oracle():
    # H = 1: scores s_j = v * tanh(wq * q + wm * m_j)
    q, m, wq, wm, v = 0.7, [0.3, -1.2], 1.5, -0.4, 2.0
    s = [v * math.tanh(wq * q + wm * mj) for mj in m]
    e = [math.exp(x) for x in s]
    expected = [x / sum(e) for x in e]
    ctx, w, _ = nx.additive_attention_forward(np.array([q]), np.array(m)[:, None], np.array([[wq]]),
                                              np.array([[wm]]), np.array([v]))
    np.testing.assert_allclose(w, expected, rtol=0, atol=1e-12)
    assert abs(ctx[0] - (expected[0] * m[0] + expected[1] * m[1])) < 1e-12


def test_softmax_xent_examples():
    loss, grad = nx.softmax_xent(np.zeros(7), 2)
    assert loss == pytest.approx(math.log(7), abs=1e-15)
    expected = np.full(7, 1 / 7)
    expected[2] -= 1
    np.testing.assert_allclose(grad, expected, atol=1e-15)
    loss, _ = nx.softmax_xent(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ValueError):
        nx.softmax_xent(np.zeros(3), 3)


def test_softmax_xent_gradient():
    rng = np.random.default_rng(2)
    for _ in range(INSTANCES):
        z = rng.normal(size=int(rng.integers(2, 8)))
        t = int(rng.integers(0, z.size))
        _, g = nx.softmax_xent(z, t)
        err = nx.gradient_check(lambda: nx.softmax_xent(z, t)[0], {"z": z}, {"z": g})
        assert err["z"] < TOL


def test_conv1d_matches_direct_loops():
    rng = np.random.default_rng(4)
    x, W, b = rng.normal(size=(2, 3, 11)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    out, _ = nx.conv1d_forward(x, W, b, stride=2)
    L_out = (11 - 3) // 2 + 1
    ref = np.zeros((2, 4, L_out))
    for n in range(2):
        for f in range(4):
            for l in range(L_out):
                ref[n, f, l] = b[f] + sum(W[f, c, k] * x[n, c, 2 * l + k]
                                          for c in range(3) for k in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)
    with pytest.raises(ValueError, match="shorter"):
        nx.conv1d_forward(np.zeros((1, 3, 2)), W, b)


def test_embedding_rejects_bad_index():
    with pytest.raises(IndexError):
        nx.embedding_forward(np.zeros((3, 2)), [3])


# ---------------------------------------------------------------------------
# Optimizer and parameter store
# ---------------------------------------------------------------------------

def test_adam_first_step_oracle():
    store = nx.ParamStore()
    p0 = np.array([1.0, -2.0, 0.5])
    store.add("w", p0)
    g = np.array([0.3, -0.1, 0.0])
    store.grads["w"][:] = g
    store.adam_step(learning_rate=0.01)
    # bias-corrected moments equal g and g^2 after one step
    expected = p0 - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(store["w"], expected, rtol=0, atol=1e-15)
    assert store.step == 1


def test_adam_two_step_oracle():
    b1, b2, lr, eps = 0.9, 0.999, 0.1, 1e-8
    store = nx.ParamStore()
    store.add("w", np.array([0.0]))
    p, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate((0.5, -0.2), start=1):
        store.grads["w"][:] = g
        store.adam_step(lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert store["w"][0] == pytest.approx(p, abs=1e-15)


def test_adam_rejects_non_finite_gradients():
    store = nx.ParamStore()
    store.add("w", np.zeros(2))
    store.grads["w"][0] = np.nan
    with pytest.raises(nx.NumericalError):
        store.adam_step()
    with pytest.raises(nx.NumericalError):
        store.add("bad", np.array([np.inf]))


def test_clip_grad_norm():
    store = nx.ParamStore()
    store.add("a", np.zeros(2))
    store.add("b", np.zeros(1))
    store.grads["a"][:] = [3.0, 0.0]
    store.grads["b"][:] = [4.0]
    assert store.clip_grad_norm(5.0) == 5.0
    np.testing.assert_array_equal(store.grads["a"], [3.0, 0.0])
    store.clip_grad_norm(1.0)
    assert store.grad_norm() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(store.grads["b"], [0.8])


def test_param_store_duplicates_and_copy():
    store = nx.ParamStore()
    store.add("w", np.ones(2))
    with pytest.raises(KeyError):
        store.add("w", np.ones(2))
    other = store.copy()
    other["w"][0] = 5
    assert store["w"][0] == 1


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _store(rng):
    store = nx.ParamStore()
    store.add("embed", rng.normal(size=(4, 3)))
    store.add_lstm("enc", 3, 2, rng)
    store.add("scalar_vec", rng.normal(size=1))
    store.grads["embed"][:] = rng.normal(size=(4, 3))
    store.adam_step()
    return store


def test_checkpoint_round_trip(tmp_path):
    store = _store(np.random.default_rng(0))
    meta = {"config": {"a": 1, "b": [1, 2]}, "name": "x"}
    nx.save_checkpoint(tmp_path / "c.sdck", store, meta)
    back, meta2 = nx.load_checkpoint(tmp_path / "c.sdck")
    assert meta2 == meta and back.step == store.step
    assert list(back.params) == list(store.params)
    for name in store.params:
        assert back[name].tobytes() == store[name].tobytes()
        assert back.m[name].tobytes() == store.m[name].tobytes()
        assert back.v[name].tobytes() == store.v[name].tobytes()


def test_checkpoint_bytes_are_deterministic(tmp_path):
    for i in range(2):
        nx.save_checkpoint(tmp_path / f"{i}.sdck", _store(np.random.default_rng(9)), {"k": 1.5})
    assert (tmp_path / "0.sdck").read_bytes() == (tmp_path / "1.sdck").read_bytes()
    assert (tmp_path / "0.sdck").read_bytes()[:4] == b"SDCK"


def test_checkpoint_without_optimizer_and_bad_magic(tmp_path):
    store = _store(np.random.default_rng(1))
    nx.save_checkpoint(tmp_path / "c.sdck", store, include_optimizer=False)
    back, _ = nx.load_checkpoint(tmp_path / "c.sdck")
    assert not back.m["embed"].any()
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError, match="not a checkpoint"):
        nx.load_checkpoint(tmp_path / "bad")


# ---------------------------------------------------------------------------
# Finite-difference helpers
# ---------------------------------------------------------------------------

def test_numerical_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = nx.numerical_gradient(lambda: float(np.sum(x ** 2)), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])
    g = nx.numerical_gradient(lambda: float(np.sum(x ** 2)), x, index=[1])
    assert g[0] == 0 and g[2] == 0 and g[1] == pytest.approx(-4.0)


def test_max_relative_error_floor():
    assert nx.max_relative_error(np.array([1.0]), np.array([1.0 + 1e-6])) == pytest.approx(5e-7, rel=1e-3)
    # entries at the finite-difference noise floor do not dominate
    assert nx.max_relative_error(np.array([1e-10]), np.array([3e-10])) < 1e-3
    assert nx.max_relative_error(np.zeros(0), np.zeros(0)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_affine_gradient_property(d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(2, d_in)), rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
    R = rng.normal(size=(2, d_out))
    _, cache = nx.affine_forward(x, W, b)
    dx, dW, db = nx.affine_backward(R, cache)
    # exact identities for a linear map
    np.testing.assert_allclose(dx, R @ W, atol=1e-12)
    np.testing.assert_allclose(dW, R.T @ x, atol=1e-12)
    np.testing.assert_allclose(db, R.sum(axis=0), atol=1e-12)
