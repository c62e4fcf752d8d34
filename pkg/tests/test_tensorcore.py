import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadtte import tensorcore as tc

from gradcheck import GRAD_CASES, check_op


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for trial in range(25):
        fn, inputs = GRAD_CASES[name](rng)
        assert check_op(fn, inputs, seed=trial) < 1.0, f"{name} trial {trial}"


def _loop_conv(x, W, b):
    k, _, c_out = W.shape
    n = x.shape[0]
    out = np.zeros((n - k + 1, c_out))
    for i in range(n - k + 1):
        for j in range(k):
            out[i] += x[i + j] @ W[j]
        out[i] += b
    return out


def test_conv1d_shape_and_loop_oracle(rng):
    x = rng.normal(size=(5, 4))
    W = rng.normal(size=(3, 4, 6))
    b = rng.normal(size=6)
    out = tc.conv1d(x, W, b)
    assert out.shape == (3, 6)
    np.testing.assert_allclose(out.values, _loop_conv(x, W, b), rtol=0, atol=1e-12)


def test_conv1d_centre_tap_kernel_reproduces_window_centres(rng):
    x = rng.normal(size=(7, 3))
    W = np.zeros((3, 3, 3))
    W[1] = np.eye(3)
    out = tc.conv1d(x, W, np.zeros(3))
    np.testing.assert_array_equal(out.values, x[1:-1])


def test_conv1d_shape_error_names_shapes():
    with pytest.raises(tc.ShapeError, match=r"\(5, 4\).*\(3, 2, 6\)"):
        tc.conv1d(np.zeros((5, 4)), np.zeros((3, 2, 6)))


def test_lstm_zero_everything_gives_zero_output():
    h, (h2, c) = tc.lstm_step(np.zeros((1, 3)), (np.zeros((1, 4)), np.zeros((1, 4))),
                              np.zeros((3, 16)), np.zeros((4, 16)), np.zeros(16))
    assert np.all(h.values == 0) and np.all(c.values == 0)


def test_lstm_hidden_state_is_bounded(rng):
    h = tc.Tensor(np.zeros((2, 4)))
    c = tc.Tensor(np.zeros((2, 4)))
    W_x, W_h, b = rng.normal(size=(3, 16)) * 5, rng.normal(size=(4, 16)) * 5, rng.normal(size=16)
    for _ in range(20):
        out, (h, c) = tc.lstm_step(rng.normal(size=(2, 3)) * 10, (h, c), W_x, W_h, b)
        assert np.all(np.abs(out.values) <= 1.0)


def test_attention_pool_single_step_and_uniform(rng):
    h = rng.normal(size=(2, 1, 3))
    pooled, w = tc.attention_pool(h, rng.normal(size=(2, 3)))
    np.testing.assert_array_equal(pooled.values, h[:, 0])
    assert np.all(w.values == 1.0)
    h = rng.normal(size=(1, 5, 3))
    pooled, w = tc.attention_pool(h, np.zeros((1, 3)))
    np.testing.assert_allclose(pooled.values[0], h[0].mean(axis=0), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_attention_weights_are_a_distribution(m, H, seed):
    r = np.random.default_rng(seed)
    mask = r.random((3, m)) < 0.7
    mask[:, 0] = True
    _, w = tc.attention_pool(r.normal(size=(3, m, H)) * 3, r.normal(size=(3, H)), mask)
    assert np.all(w.values >= 0)
    assert np.all(w.values[~mask] == 0)
    np.testing.assert_allclose(w.values.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_attention_pool_rejects_empty_sequence():
    with pytest.raises(tc.ShapeError):
        tc.attention_pool(np.zeros((1, 0, 3)), np.zeros((1, 3)))


def test_linear_loss_gradient_is_input_structure(rng):
    W = tc.Parameter(rng.normal(size=(4, 3)), "W")
    x = rng.normal(size=(5, 4))
    tc.backward(tc.sum(tc.matmul(x, W)))
    np.testing.assert_array_equal(W.grad, np.repeat(x.sum(axis=0)[:, None], 3, axis=1))


def test_backward_requires_scalar():
    W = tc.Parameter(np.ones((2, 2)), "W")
    with pytest.raises(tc.GraphError, match="scalar"):
        tc.backward(tc.mul(W, 2.0))


def test_second_backward_without_reset_is_an_error():
    W = tc.Parameter(np.ones(3), "W")
    loss = tc.sum(tc.mul(W, W))
    tc.backward(loss)
    with pytest.raises(tc.GraphError):
        tc.backward(loss)
    with pytest.raises(tc.GraphError, match="zero_grad"):
        tc.backward(tc.sum(tc.mul(W, 3.0)))
    tc.zero_grad([W])
    tc.backward(tc.sum(tc.mul(W, 3.0)))
    np.testing.assert_array_equal(W.grad, [3.0, 3.0, 3.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_name_the_operation():
    with pytest.raises(tc.NonFiniteError, match="log"):
        tc.log(np.array([0.0, 1.0]))
    with pytest.raises(tc.NonFiniteError, match="exp"):
        tc.exp(np.array([1000.0]))


def test_adam_first_step_moves_each_weight_by_lr():
    p = tc.Parameter(np.array([1.0, -2.0, 0.5]), "p")
    opt = tc.Adam([p])
    tc.backward(tc.sum(tc.mul(p, np.array([3.0, -0.1, 1e-3]))))
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 0.5]) - 1e-3 * np.array([3.0, -0.1, 1e-3]) / (
        np.abs([3.0, -0.1, 1e-3]) + 1e-8)
    np.testing.assert_allclose(p.values, expected, rtol=0, atol=1e-15)


def test_glorot_limits(rng):
    w = tc.glorot_uniform(rng, (30, 50))
    assert np.abs(w).max() <= np.sqrt(6 / 80)


def test_tensor_container_round_trip(rng):
    named = {"a": rng.normal(size=(2, 3)), "b.bias": rng.normal(size=(4,)), "s": np.array(2.5)}
    back = tc.unpack_tensors(tc.pack_tensors(named))
    assert list(back) == list(named)
    for k in named:
        assert back[k].shape == named[k].shape
        assert back[k].tobytes() == np.asarray(named[k], dtype="<f8").tobytes()


def test_tensor_container_rejects_garbage():
    with pytest.raises(ValueError, match="magic"):
        tc.unpack_tensors(b"XXXX\x01\x00\x00\x00\x00")
    data = bytearray(tc.pack_tensors({"a": np.ones(2)}))
    data[4] = 9
    with pytest.raises(ValueError, match="version"):
        tc.unpack_tensors(bytes(data))
