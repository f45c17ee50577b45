"""Tensor engine: op forward oracles, gradient checks, tape semantics, io."""

import numpy as np
import pytest

from fedstyle.tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    bmm,
    concat,
    conv2d,
    gather_rows,
    global_avg_pool,
    linear,
    load_tensor,
    matmul,
    save_tensor,
    set_debug_checks,
    softmax,
    softmax_cross_entropy,
)

from helpers import check_grads, conv_reference

RNG = np.random.default_rng(20240811)


def randn(*shape):
    return RNG.normal(size=shape).astype(np.float32)


# -- forward oracles ----------------------------------------------------------


def test_elementwise_values():
    a = randn(3, 4)
    b = randn(3, 4)
    assert np.array_equal((Tensor(a) + Tensor(b)).data, a + b)
    assert np.array_equal((Tensor(a) - Tensor(b)).data, a - b)
    assert np.array_equal((Tensor(a) * Tensor(b)).data, a * b)
    assert np.allclose((Tensor(a) / Tensor(b + 5.0)).data, a / (b + 5.0))
    assert np.array_equal((-Tensor(a)).data, -a)
    assert np.array_equal((Tensor(a) + 2.0).data, a + np.float32(2.0))
    assert np.array_equal((3.0 * Tensor(a)).data, np.float32(3.0) * a)


def test_elementwise_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(randn(3, 4)) + Tensor(randn(4, 3))
    with pytest.raises(ShapeError):
        Tensor(randn(3, 4)) * Tensor(randn(3, 1))  # no implicit broadcast


def test_expand_is_the_only_broadcast():
    t = Tensor(randn(3, 1))
    out = t.expand((3, 5))
    assert out.shape == (3, 5)
    assert np.array_equal(out.data, np.broadcast_to(t.data, (3, 5)))
    with pytest.raises(ShapeError):
        t.expand((4, 5))


def test_reductions_match_numpy_f64():
    a = randn(4, 5, 6)
    t = Tensor(a)
    assert np.allclose(t.sum().data, a.sum(dtype=np.float64), rtol=1e-6)
    assert np.allclose(t.mean(axis=(1, 2)).data, a.mean(axis=(1, 2), dtype=np.float64), rtol=1e-6)
    assert t.sum(axis=1, keepdims=True).shape == (4, 1, 6)


def test_matmul_oracle():
    a, b = randn(3, 4), randn(4, 5)
    assert np.allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-6)
    with pytest.raises(ShapeError):
        matmul(Tensor(a), Tensor(randn(3, 5)))
    with pytest.raises(ShapeError):
        matmul(Tensor(randn(3)), Tensor(b))


def test_bmm_oracle():
    a, b = randn(4, 3, 5), randn(4, 5, 2)
    assert np.allclose(bmm(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-6)
    with pytest.raises(ShapeError):
        bmm(Tensor(a), Tensor(randn(3, 5, 2)))
    with pytest.raises(ShapeError):
        bmm(Tensor(randn(3, 5)), Tensor(b))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 2), (1, 0, 3)])
def test_conv2d_matches_direct_loops(stride, pad, k):
    x = randn(2, 3, 6, 6)
    w = randn(4, 3, k, k)
    b = randn(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    want = conv_reference(x, w, b, stride, pad)
    assert got.shape == want.shape
    assert np.allclose(got, want, rtol=1e-4, atol=1e-5)


def test_conv2d_rejects_non_integral_output():
    x = Tensor(randn(1, 3, 6, 6))
    w = Tensor(randn(4, 3, 3, 3))
    b = Tensor(randn(4))
    with pytest.raises(ShapeError, match="not integral"):
        conv2d(x, w, b, stride=2, pad=1)  # (6+2-3)/2 does not divide


def test_softmax_rows_sum_to_one():
    t = Tensor(randn(5, 7) * 10.0)
    s = softmax(t, axis=1).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(s > 0)


def test_softmax_cross_entropy_oracle():
    logits = randn(6, 4).astype(np.float64)
    y = np.array([0, 3, 1, 2, 2, 0])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    want = -logp[np.arange(6), y].mean()
    got = softmax_cross_entropy(Tensor(logits.astype(np.float32)), y).item()
    assert abs(got - want) < 1e-6
    with pytest.raises(ShapeError):
        softmax_cross_entropy(Tensor(randn(6, 4)), np.array([0, 1, 4, 0, 0, 0]))


def test_gather_rows_values():
    t = Tensor(randn(5, 3))
    idx = [4, 0, 0, 2]
    assert np.array_equal(gather_rows(t, idx).data, t.data[idx])


# -- gradient checks ----------------------------------------------------------


def test_grad_elementwise_chain():
    a, b = randn(3, 4) + 0.3, randn(3, 4) + 3.0
    check_grads(lambda x, y: ((x * y - x / y + 2.0 * x) * x).sum(), [a, b])


def test_grad_neg_sub_scalar_mix():
    a = randn(2, 5)
    check_grads(lambda x: ((-x + 1.5) * (x - 0.25)).mean(), [a])


def test_grad_reshape_transpose_expand():
    a = randn(2, 3, 4)
    w = randn(4, 6)

    wt = randn(6, 6) * 0.3

    def loss(x, m):
        flat = x.transpose((1, 0, 2)).reshape((6, 4))
        return (matmul(flat, m) * wt).sum()

    check_grads(loss, [a, w])
    b = randn(3, 1)
    check_grads(lambda x: (x.expand((3, 5)) * np.arange(15.0).reshape(3, 5).astype(np.float32)).sum(), [b])


def test_grad_reductions():
    a = randn(3, 4, 2)
    check_grads(lambda x: x.sum(axis=(0, 2)).mean(), [a])
    check_grads(lambda x: x.mean(axis=1, keepdims=True).sum(), [a])


def test_grad_sqrt_relu_leaky():
    a = np.abs(randn(3, 4)) + 0.5
    check_grads(lambda x: x.sqrt().sum(), [a])
    # keep probes away from the kink so central differences stay two-sided
    b = randn(3, 4)
    b[np.abs(b) < 0.1] = 0.5
    check_grads(lambda x: x.relu().sum(), [b])
    check_grads(lambda x: x.leaky_relu(0.1).sum(), [b])
    check_grads(lambda x: (x.leaky_relu(0.1) * x).sum(), [b])


def test_relu_subgradient_at_kink_is_zero():
    t = Tensor(np.zeros((3,), dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = t.relu().sum()
    tape.backward(loss)
    assert np.array_equal(t.grad, np.zeros(3, dtype=np.float32))


def test_grad_matmul_bmm():
    check_grads(lambda a, b: matmul(a, b).sum(), [randn(3, 4), randn(4, 5)])
    wt = randn(2, 3, 2) * 0.3
    check_grads(lambda a, b: (bmm(a, b) * wt).sum(), [randn(2, 3, 4), randn(2, 4, 2)])


def test_grad_concat():
    a, b = randn(3, 4), randn(2, 4)
    scale = np.arange(20.0).reshape(5, 4).astype(np.float32)
    check_grads(lambda x, y: (concat([x, y], axis=0) * scale).sum(), [a, b])
    check_grads(lambda x, y: (concat([x.transpose(), y.transpose()], axis=1) * scale.T).sum(), [a, b])


def test_grad_gather_rows_duplicates_accumulate():
    # duplicate indices exercise the unbuffered scatter path
    a = randn(4, 3)
    idx = np.array([1, 1, 3, 0, 1])
    check_grads(lambda x: (gather_rows(x, idx) * gather_rows(x, idx)).sum(), [a])
    t = Tensor(a, requires_grad=True)
    with Tape() as tape:
        loss = gather_rows(t, idx).sum()
    tape.backward(loss)
    counts = np.bincount(idx, minlength=4).astype(np.float32)
    assert np.array_equal(t.grad, np.repeat(counts[:, None], 3, axis=1))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 2)])
def test_grad_conv2d(stride, pad, k):
    # weighted linear readout keeps the loss O(1) so f32 fd noise stays
    # below tolerance; op reuse is covered separately
    x = randn(2, 2, 4, 4) * 0.5
    w = randn(3, 2, k, k) * 0.5
    b = randn(3) * 0.5
    ho = (4 + 2 * pad - k) // stride + 1
    wt = randn(2, 3, ho, ho) * 0.3

    def loss(xx, ww, bb):
        return (conv2d(xx, ww, bb, stride=stride, pad=pad) * wt).sum()

    check_grads(loss, [x, w, b])


def test_grad_pool_linear_softmax_ce():
    x = randn(3, 4, 4, 4)
    check_grads(lambda t: global_avg_pool(t).sum(), [x])
    a, w, b = randn(4, 6), randn(3, 6), randn(3)
    wt = randn(4, 3) * 0.3
    check_grads(lambda xx, ww, bb: (linear(xx, ww, bb) * wt).mean(), [a, w, b])
    logits = randn(5, 4) * 2.0
    y = np.array([0, 1, 3, 2, 1])
    check_grads(lambda t: softmax_cross_entropy(t, y), [logits])
    sw = randn(5, 4) * 0.5
    check_grads(lambda t: (softmax(t, axis=1) * sw).sum(), [logits])


def test_grad_reused_tensor_sums_both_paths():
    t = Tensor(randn(3, 3), requires_grad=True)
    with Tape() as tape:
        loss = (t * 2.0).sum() + (t * 3.0).sum()
    tape.backward(loss)
    assert np.allclose(t.grad, np.full((3, 3), 5.0), atol=1e-6)


# -- tape semantics -----------------------------------------------------------


def test_tapes_do_not_nest():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass


def test_backward_requires_scalar():
    t = Tensor(randn(3), requires_grad=True)
    with Tape() as tape:
        out = t * 2.0
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_sequential_tapes_are_isolated():
    t = Tensor(randn(4), requires_grad=True)
    with Tape() as tape1:
        loss1 = (t * 2.0).sum()
    tape1.backward(loss1)
    g1 = t.grad.copy()
    t.zero_grad()
    with Tape() as tape2:
        loss2 = (t * 3.0).sum()
    tape2.backward(loss2)
    assert np.allclose(g1, 2.0) and np.allclose(t.grad, 3.0)


def test_no_recording_without_tape():
    t = Tensor(randn(3), requires_grad=True)
    out = (t * 2.0).sum()
    assert out._backward is None


def test_debug_checks_flag_nonfinite():
    set_debug_checks(True)
    try:
        with pytest.raises(NumericError), np.errstate(divide="ignore", invalid="ignore"):
            Tensor(np.array([1.0, 0.0], dtype=np.float32)) / Tensor(
                np.array([1.0, 0.0], dtype=np.float32)
            )
    finally:
        set_debug_checks(False)


# -- fixture io ---------------------------------------------------------------


def test_tensor_fixture_round_trip(tmp_path):
    t = Tensor(randn(3, 5))
    path = tmp_path / "fix.tensor"
    save_tensor(path, t)
    back = load_tensor(path)
    assert back.shape == (3, 5)
    assert np.array_equal(back.data, t.data)
    raw = path.read_bytes()
    header, payload = raw.split(b"\n", 1)
    import json

    meta = json.loads(header)
    assert meta == {"shape": [3, 5], "dtype": "f32"}
    assert len(payload) == 3 * 5 * 4


def test_tensor_fixture_rejects_bad_payload(tmp_path):
    path = tmp_path / "bad.tensor"
    path.write_bytes(b'{"shape": [2], "dtype": "f32"}\n\x00\x00')
    with pytest.raises(ValueError):
        load_tensor(path)
