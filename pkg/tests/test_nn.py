import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from textseg import nn
from textseg.errors import (CheckpointError, NonFiniteActivation,
                            NonFiniteGradient, ShapeMismatch)

finite = st.floats(-50, 50, allow_nan=False)


def cell(rng, d, h, scale=0.5):
    return nn.LstmCellParams(rng.normal(0, scale, (4 * h, d)), rng.normal(0, scale, (4 * h, h)),
                             rng.normal(0, scale, 4 * h))


def zero_cell(d, h):
    return nn.LstmCellParams(np.zeros((4 * h, d)), np.zeros((4 * h, h)), np.zeros(4 * h))


def unrolled(p, xs, reverse=False):
    """Reference: apply lstm_cell_forward step by step."""
    h, c = np.zeros(p.hidden), np.zeros(p.hidden)
    out = np.zeros((len(xs), p.hidden))
    for t in (range(len(xs) - 1, -1, -1) if reverse else range(len(xs))):
        h, c = nn.lstm_cell_forward(p, xs[t], h, c)
        out[t] = h
    return out


def fd_check(loss_fn, arrays_, grads, eps=1e-5):
    worst = 0.0
    for a, g in zip(arrays_, grads):
        flat, gflat = a.reshape(-1), np.reshape(g, -1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - gflat[j]) / max(abs(num), abs(gflat[j]), 1e-6))
    return worst


# ----------------------------------------------------------------- cell

def test_cell_all_zero():
    h, c = nn.lstm_cell_forward(zero_cell(3, 2), np.ones(3), np.zeros(2), np.zeros(2))
    assert np.all(h == 0) and np.all(c == 0)


def test_cell_scalar_hand_evaluation():
    # every gate pre-activation is 0: i=f=o=0.5, g=0
    h, c = nn.lstm_cell_forward(zero_cell(2, 1), [0.3, -7.0], [0.0], [1.0])
    assert c[0] == 0.5
    assert h[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)
    assert h[0] == pytest.approx(0.231059, abs=1e-6)


def test_cell_gate_order():
    # only the forget-gate bias is large: c carries over, nothing is written
    p = zero_cell(1, 1)
    p.b[1] = 50.0
    _, c = nn.lstm_cell_forward(p, [0.0], [0.0], [0.8])
    assert c[0] == pytest.approx(0.8)
    p = zero_cell(1, 1)
    p.b[2] = 50.0  # cell candidate g -> 1, i = 0.5
    _, c = nn.lstm_cell_forward(p, [0.0], [0.0], [0.0])
    assert c[0] == pytest.approx(0.5)


def test_cell_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.lstm_cell_forward(zero_cell(3, 2), np.ones(2), np.zeros(2), np.zeros(2))
    with pytest.raises(ShapeMismatch):
        nn.LstmCellParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))


def test_cell_non_finite():
    with pytest.raises(NonFiniteActivation):
        nn.lstm_cell_forward(zero_cell(1, 1), [np.nan], [0.0], [0.0])


def test_sequence_matches_unrolled_cells(rng):
    p = cell(rng, 3, 4)
    xs = rng.normal(size=(5, 3))
    for reverse in (False, True):
        H, _ = nn._lstm_sequence(p.W, p.U, p.b, xs, reverse)
        np.testing.assert_allclose(H, unrolled(p, xs, reverse), rtol=0, atol=1e-14)


@pytest.mark.parametrize("T, reverse", [(1, False), (2, False), (3, True), (4, True)])
def test_lstm_gradient_finite_differences(rng, T, reverse):
    p = cell(rng, 3, 2)
    xs = rng.normal(size=(T, 3))
    weights = rng.normal(size=(T, 2))

    def loss():
        H, _ = nn._lstm_sequence(p.W, p.U, p.b, xs, reverse)
        return float(np.sum(weights * H))

    tape = nn.Tape()
    x = tape.param("x", xs)
    nodes = [tape.param(k, getattr(p, k)) for k in "WUb"]
    out = nn.lstm(x, *nodes, reverse=reverse)
    loss_node = tape._record(np.array(np.sum(weights * out.value)), (out,), lambda g: (g * weights,))
    grads = tape.backward(loss_node)
    err = fd_check(loss, [xs, p.W, p.U, p.b], [grads["x"], grads["W"], grads["U"], grads["b"]])
    assert err < 1e-4


# --------------------------------------------------------------- bilstm

def test_bilstm_single_step_is_two_independent_cells(rng):
    p = nn.BiLstmParams([(cell(rng, 3, 2), cell(rng, 3, 2))])
    x = rng.normal(size=3)
    out = nn.bilstm_forward(p, x[None, :])
    fw, _ = nn.lstm_cell_forward(p.layers[0][0], x, np.zeros(2), np.zeros(2))
    bw, _ = nn.lstm_cell_forward(p.layers[0][1], x, np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(out, np.concatenate([fw, bw])[None, :])


def test_bilstm_zero_params_zero_output(rng):
    p = nn.BiLstmParams([(zero_cell(3, 2), zero_cell(3, 2)), (zero_cell(4, 2), zero_cell(4, 2))])
    assert np.all(nn.bilstm_forward(p, rng.normal(size=(6, 3))) == 0)


def test_bilstm_reversal_swaps_blocks_with_shared_cell(rng):
    for _ in range(20):
        shared = cell(rng, 3, 2)
        p = nn.BiLstmParams([(shared, shared)])
        xs = rng.normal(size=(3, 3))
        a = nn.bilstm_forward(p, xs)
        b = nn.bilstm_forward(p, xs[::-1])
        np.testing.assert_allclose(a[:, :2], b[::-1, 2:], atol=1e-14)
        np.testing.assert_allclose(a[:, 2:], b[::-1, :2], atol=1e-14)


def test_bilstm_matches_unrolled_reference(rng):
    p = nn.BiLstmParams.init(rng, 3, 2, num_layers=2)
    xs = rng.normal(size=(4, 3))
    h = xs
    for fw, bw in p.layers:
        h = np.concatenate([unrolled(fw, h), unrolled(bw, h, reverse=True)], axis=1)
    np.testing.assert_allclose(nn.bilstm_forward(p, xs), h, atol=1e-14)


def test_bilstm_layer_chain_checked(rng):
    with pytest.raises(ShapeMismatch):
        nn.BiLstmParams([(cell(rng, 3, 2), cell(rng, 3, 2)), (cell(rng, 3, 2), cell(rng, 3, 2))])
    p = nn.BiLstmParams.init(rng, 3, 2)
    with pytest.raises(ShapeMismatch):
        nn.bilstm_forward(p, np.zeros((2, 4)))
    with pytest.raises(ShapeMismatch):
        nn.bilstm_forward(p, np.zeros((0, 3)))


@pytest.mark.parametrize("T", [1, 2, 3, 4])
def test_bilstm_gradient_check(rng, T):
    p = nn.BiLstmParams.init(rng, 3, 2, num_layers=2)
    named = p.named("m")
    xs = rng.normal(size=(T, 3))
    w = rng.normal(size=(T, 4))

    def run(params):
        tape = nn.Tape()
        nodes = tape.params(params)
        out = nn.bilstm(tape.constant(xs), nodes, "m", 2)
        loss = tape._record(np.array(np.sum(w * out.value)), (out,), lambda g: (g * w,))
        return float(loss.value), tape, loss

    _, tape, loss = run(named)
    report = nn.grad_check(lambda q: run(q)[0], named, tape.backward(loss), eps=1e-5, tol=1e-4)
    assert report.passed, report
    assert report.checked == sum(v.size for v in named.values())


# ------------------------------------------------------- pool / dense / softmax

def test_max_pool_examples():
    np.testing.assert_array_equal(nn.max_pool_time([[1, 5], [3, 2]]), [3, 5])
    np.testing.assert_array_equal(nn.max_pool_time([[4, -1]]), [4, -1])
    with pytest.raises(ShapeMismatch):
        nn.max_pool_time(np.zeros((0, 2)))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=finite), st.randoms())
def test_max_pool_properties(m, random):
    pooled = nn.max_pool_time(m)
    assert np.all(pooled >= m)
    rows = list(range(m.shape[0]))
    random.shuffle(rows)
    np.testing.assert_array_equal(nn.max_pool_time(m[rows]), pooled)


def test_max_pool_gradient_routes_to_argmax():
    tape = nn.Tape()
    m = tape.param("m", [[1.0, 5.0], [3.0, 2.0]])
    out = nn.max_pool(m)
    loss = tape._record(np.array(out.value @ [2.0, 7.0]), (out,), lambda g: (g * np.array([2.0, 7.0]),))
    np.testing.assert_array_equal(tape.backward(loss)["m"], [[0, 7], [2, 0]])


def test_dense_examples():
    np.testing.assert_array_equal(nn.dense_forward(np.eye(2), np.zeros(2), [3.0, -4.0]), [3.0, -4.0])
    np.testing.assert_array_equal(nn.dense_forward(np.ones((2, 3)), [0.5, -1.0], np.zeros(3)), [0.5, -1.0])
    with pytest.raises(ShapeMismatch):
        nn.dense_forward(np.eye(2), np.zeros(2), np.zeros(3))


def test_dense_gradient(rng):
    x0, W0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
    wts = rng.normal(size=(3, 2))
    tape = nn.Tape()
    out = nn.dense(tape.param("x", x0), tape.param("W", W0), tape.param("b", b0))
    loss = tape._record(np.array(np.sum(wts * out.value)), (out,), lambda g: (g * wts,))
    grads = tape.backward(loss)

    def f():
        return float(np.sum(wts * (x0 @ W0.T + b0)))

    assert fd_check(f, [x0, W0, b0], [grads["x"], grads["W"], grads["b"]]) < 1e-6


def test_softmax2_examples():
    np.testing.assert_array_equal(nn.softmax2([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(nn.softmax2([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)
    np.testing.assert_allclose(nn.softmax2([1000.0, 0.0]), [1.0, 0.0])


@given(arrays(np.float64, 2, elements=st.floats(-30, 30)), st.floats(-1e3, 1e3))
def test_softmax2_properties(v, shift):
    p = nn.softmax2(v)
    assert np.all(p > 0) and abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(nn.softmax2(v + shift), p, rtol=1e-9, atol=1e-15)


def test_softmax_xent_gradient_is_softmax_minus_onehot(rng):
    logits0 = rng.normal(size=(3, 2))
    y = np.array([1.0, 0.0])
    tape = nn.Tape()
    loss = nn.softmax_xent(tape.param("z", logits0), y)
    g = tape.backward(loss)["z"]
    p = nn.softmax2(logits0[:2])
    np.testing.assert_allclose(g[:2], p - np.stack([1 - y, y], axis=1), atol=1e-15)
    assert np.all(g[2] == 0)

    def f():
        q = nn.softmax2(logits0[:2])[:, 1]
        return nn.xent_loss(y, q)

    assert fd_check(f, [logits0], [g]) < 1e-6


# ------------------------------------------------------------------ tape

def test_backward_constant_loss_gives_zero_grads():
    tape = nn.Tape()
    tape.param("W", np.ones((2, 3)))
    loss = tape.constant(4.2)
    grads = tape.backward(loss)
    assert list(grads) == ["W"] and np.all(grads["W"] == 0)


def test_backward_is_repeatable(rng):
    p = nn.BiLstmParams.init(rng, 2, 3, num_layers=1)
    tape = nn.Tape()
    out = nn.max_pool(nn.bilstm(tape.constant(rng.normal(size=(3, 2))), tape.params(p.named("e")), "e", 1))
    loss = nn.softmax_xent(nn.dense(nn.stack([out, out]), tape.param("W", rng.normal(size=(2, 6))),
                                    tape.param("b", np.zeros(2))), [1])
    a, b = tape.backward(loss), tape.backward(loss)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_backward_non_finite():
    tape = nn.Tape()
    x = tape.param("x", [1.0, 2.0])
    out = nn.max_pool(tape._record(x.value[None, :], (x,), lambda g: (g[0],)))
    with pytest.raises(NonFiniteGradient):
        tape.backward(out, seed=np.inf)


# --------------------------------------------------------------- sgd

def test_sgd_zero_lr():
    params = {"w": np.array([1.0, -2.0])}
    out = nn.sgd_step(params, {"w": np.array([3.0, 4.0])}, lr=0.0)
    np.testing.assert_array_equal(out["w"], params["w"])


def test_sgd_scalar_update():
    out = nn.sgd_step({"p": np.array(1.0)}, {"p": np.array(2.0)}, lr=0.1)
    assert out["p"] == pytest.approx(0.8, abs=1e-15)


def test_sgd_clip_rescales_global_norm():
    grads = {"a": np.array([6.0]), "b": np.array([8.0])}  # norm 10
    out = nn.sgd_step({"a": np.zeros(1), "b": np.zeros(1)}, grads, lr=0.5, clip=1.0)
    np.testing.assert_allclose(out["a"], [-0.5 * 0.6])
    np.testing.assert_allclose(out["b"], [-0.5 * 0.8])
    # under the clip norm nothing changes
    out = nn.sgd_step({"a": np.zeros(1), "b": np.zeros(1)}, grads, lr=0.5, clip=100.0)
    np.testing.assert_allclose(out["a"], [-3.0])


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.sgd_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, lr=0.1)
    with pytest.raises(ShapeMismatch):
        nn.sgd_step({"a": np.zeros(2)}, {"b": np.zeros(2)}, lr=0.1)


def test_sgd_decreases_convex_quadratic(rng):
    A = rng.normal(size=(3, 3))
    Q = A @ A.T + np.eye(3)
    lr = 1.0 / np.linalg.eigvalsh(Q).max()
    params = {"x": rng.normal(size=3)}
    prev = np.inf
    for _ in range(200):
        x = params["x"]
        loss = 0.5 * x @ Q @ x
        assert loss < prev or loss == 0.0
        prev = loss
        params = nn.sgd_step(params, {"x": Q @ x}, lr)
    assert prev < 1e-6


# ---------------------------------------------------------- grad check

def test_grad_check_quadratic():
    report = nn.grad_check(lambda q: float(q["p"] ** 2), {"p": np.array(3.0)}, {"p": np.array(6.0)},
                           eps=1e-5, tol=1e-9)
    assert report.passed and report.max_rel_error < 1e-9


def test_grad_check_constant():
    report = nn.grad_check(lambda q: 1.0, {"p": np.ones(3)}, {"p": np.zeros(3)})
    assert report.passed and report.max_rel_error == 0.0


def test_grad_check_flags_wrong_gradient():
    report = nn.grad_check(lambda q: float(np.sum(q["p"] ** 2)), {"p": np.array([1.0, 2.0])},
                           {"p": np.array([2.0, 5.0])})
    assert not report.passed and report.worst == ("p", 1)


def test_grad_check_sampling_is_deterministic():
    params = {"p": np.arange(50.0)}
    f = lambda q: float(np.sum(q["p"] ** 2))  # noqa: E731
    a = nn.grad_check(f, params, {"p": 2 * params["p"]}, samples=10, seed=3)
    b = nn.grad_check(f, params, {"p": 2 * params["p"]}, samples=10, seed=3)
    assert a == b and a.checked == 10


# -------------------------------------------------------------- blocks

def test_blocks_roundtrip(rng):
    blocks = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4), "s": np.array(1.5)}
    buf = io.BytesIO()
    nn.write_blocks(buf, {"format_version": 1, "x": "y"}, blocks)
    header, back = nn.read_blocks(io.BytesIO(buf.getvalue()))
    assert header == {"format_version": 1, "x": "y"}
    assert list(back) == list(blocks)
    for k in blocks:
        np.testing.assert_array_equal(back[k], blocks[k])


def test_blocks_little_endian_payload():
    buf = io.BytesIO()
    nn.write_blocks(buf, {}, {"v": np.array([1.0])})
    assert buf.getvalue().endswith(b"\x00\x00\x00\x00\x00\x00\xf0\x3f")


@pytest.mark.parametrize("mangle", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\x00"])
def test_blocks_corruption(mangle):
    buf = io.BytesIO()
    nn.write_blocks(buf, {}, {"v": np.ones(3)})
    with pytest.raises(CheckpointError):
        nn.read_blocks(io.BytesIO(mangle(buf.getvalue())))
