"""Forward values and finite-difference gradient checks for the numeric core."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wanseg.core import (
    EPS, Adam, AdamState, Tensor, activation, adam_step, avg_pool2d, bce, concat_channels, conv2d, dense,
    global_avg_pool, grad_check, leaky_relu, max_pool2d, no_grad, relu, resize_bilinear, sigmoid,
    topological_order, upsample_nearest,
)
from wanseg.errors import ContractError

TOL = 1e-4


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def probe(rng, shape):
    """Fixed random weights turning a tensor output into a scalar for grad_check."""
    return Tensor(rng.normal(size=shape))


# --- conv2d ---------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = t(rng.normal(size=(2, 3, 5, 5)))
    k = np.zeros((3, 3, 1, 1))
    k[np.arange(3), np.arange(3)] = 1.0
    out = conv2d(x, t(k), t(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_ones_kernel_interior_is_nine():
    out = conv2d(t(np.ones((1, 1, 6, 6))), t(np.ones((1, 1, 3, 3))), t([0.0]))
    np.testing.assert_array_equal(out.data[0, 0, 1:-1, 1:-1], 9.0)
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    out = conv2d(t(x), t(k), None, padding="valid").data
    ref = np.zeros((1, 3, 3, 4))
    for o in range(3):
        for i in range(3):
            for j in range(4):
                ref[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * k[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("h,k,stride,padding", [
    (8, 3, 1, "same"), (8, 4, 2, "same"), (9, 4, 2, "same"), (8, 3, 2, "valid"), (7, 1, 1, "valid"),
    (256, 4, 2, "same"),
])
def test_conv_output_shape_formula(h, k, stride, padding):
    x = Tensor(np.zeros((1, 1, h, h), np.float32))
    out = conv2d(x, Tensor(np.zeros((2, 1, k, k), np.float32)), stride=stride, padding=padding)
    if padding == "same":
        pad_total = max((math.ceil(h / stride) - 1) * stride + k - h, 0)
    else:
        pad_total = 0
    assert out.shape == (1, 2, (h + pad_total - k) // stride + 1, (h + pad_total - k) // stride + 1)


def test_conv_gradcheck(rng):
    x = t(rng.normal(size=(2, 3, 8, 8)))
    k = t(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    b = t(rng.normal(size=4))
    w = probe(rng, (2, 4, 8, 8))
    assert grad_check(lambda x, k, b: (conv2d(x, k, b) * w).sum(), [x, k, b]) < TOL


def test_conv_strided_gradcheck(rng):
    x = t(rng.normal(size=(1, 2, 9, 9)))
    k = t(rng.normal(size=(3, 2, 4, 4)))
    w = probe(rng, (1, 3, 5, 5))
    assert grad_check(lambda x, k: (conv2d(x, k, stride=2) * w).sum(), [x, k]) < TOL


def test_conv_channel_mismatch():
    with pytest.raises(ContractError):
        conv2d(t(np.zeros((1, 3, 4, 4))), t(np.zeros((2, 2, 3, 3))))


# --- pooling and resampling ----------------------------------------------

def test_max_pool_values():
    x = t(np.arange(16, dtype=float).reshape(1, 1, 4, 4)[:, :, ::-1])
    out = max_pool2d(x)
    np.testing.assert_array_equal(out.data[0, 0], [[13, 15], [5, 7]])


def test_max_pool_constant_first_wins():
    x = t(np.ones((1, 1, 4, 4)))
    x.requires_grad = True
    max_pool2d(x).sum().backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_max_pool_gradcheck(rng):
    x = t(rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) / 10.0)
    w = probe(rng, (2, 3, 4, 4))
    assert grad_check(lambda x: (max_pool2d(x) * w).sum(), [x]) < TOL


def test_max_pool_rejects_odd_extent():
    with pytest.raises(ContractError):
        max_pool2d(t(np.zeros((1, 1, 5, 4))))


def test_bilinear_identity_and_corners():
    x = t(np.arange(4.0).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(resize_bilinear(x, 1).data, x.data)
    up = resize_bilinear(x, 2).data[0, 0]
    assert up.shape == (4, 4)
    assert up[0, 0] == 0.0 and up[-1, -1] == 3.0
    # half-pixel centres: out[1] samples src 0.25 between rows 0 and 1
    np.testing.assert_allclose(up[1, 0], 0.5)


def test_bilinear_half_is_two_by_two_mean(rng):
    x = rng.normal(size=(1, 2, 8, 8))
    down = resize_bilinear(t(x), 0.5).data
    np.testing.assert_allclose(down, x.reshape(1, 2, 4, 2, 4, 2).mean(axis=(3, 5)), atol=1e-14)


@pytest.mark.parametrize("factor,out", [(2, 12), (0.5, 3), ("4/3", 8)])
def test_bilinear_gradcheck(rng, factor, out):
    x = t(rng.normal(size=(1, 2, 6, 6)))
    w = probe(rng, (1, 2, out, out))
    assert grad_check(lambda x: (resize_bilinear(x, factor) * w).sum(), [x]) < TOL


def test_bilinear_zero_extent():
    with pytest.raises(ContractError):
        resize_bilinear(t(np.zeros((1, 1, 2, 2))), 0.25)


def test_upsample_nearest():
    np.testing.assert_array_equal(upsample_nearest(t([[[[5.0]]]]), 2).data, np.full((1, 1, 2, 2), 5.0))
    x = t(np.ones((1, 2, 3, 3)))
    x.requires_grad = True
    upsample_nearest(x, 3).sum().backward()
    np.testing.assert_array_equal(x.grad, 9.0)
    with pytest.raises(ContractError):
        upsample_nearest(x, 0)


def test_upsample_gradcheck(rng):
    x = t(rng.normal(size=(2, 1, 3, 3)))
    w = probe(rng, (2, 1, 6, 6))
    assert grad_check(lambda x: (upsample_nearest(x, 2) * w).sum(), [x]) < TOL


def test_avg_and_global_pool_gradcheck(rng):
    x = t(rng.normal(size=(2, 3, 4, 4)))
    w1, w2 = probe(rng, (2, 3, 2, 2)), probe(rng, (2, 3))
    assert grad_check(lambda x: (avg_pool2d(x, 2) * w1).sum() + (global_avg_pool(x) * w2).sum(), [x]) < TOL


# --- concat / dense / activations ------------------------------------------

def test_concat_shapes_and_empty():
    a, b = t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 4, 4)))
    assert concat_channels(a, b).shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(concat_channels(a, t(np.zeros((1, 0, 4, 4)))).data, a.data)
    with pytest.raises(ContractError):
        concat_channels(a, t(np.zeros((1, 3, 2, 4))))


def test_concat_gradcheck(rng):
    a, b = t(rng.normal(size=(1, 2, 3, 3))), t(rng.normal(size=(1, 1, 3, 3)))
    w = probe(rng, (1, 3, 3, 3))
    assert grad_check(lambda a, b: (concat_channels(a, b) * w).sum(), [a, b]) < TOL


def test_dense_values_and_grad(rng):
    np.testing.assert_allclose(dense(t([[1.0, 2.0]]), t([[1.0], [1.0]]), t([0.5])).data, [[3.5]])
    x = t(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(dense(x, t(np.eye(4)), t(np.zeros(4))).data, x.data)
    w, b = t(rng.normal(size=(4, 2))), t(rng.normal(size=2))
    p = probe(rng, (3, 2))
    assert grad_check(lambda x, w, b: (dense(x, w, b) * p).sum(), [x, w, b]) < TOL
    with pytest.raises(ContractError):
        dense(x, t(np.zeros((3, 2))))


def test_activation_values():
    assert leaky_relu(t([-1.0]), 0.2).data[0] == pytest.approx(-0.2)
    assert sigmoid(t([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(relu(t([-3.0, 3.0])).data, [0.0, 3.0])
    s = sigmoid(t([-100.0, 100.0])).data
    assert s[0] == EPS and s[1] == 1.0 - EPS
    with pytest.raises(ContractError):
        activation(t([0.0]), "tanh")


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "sigmoid"])
def test_activation_gradcheck(rng, kind):
    x = t(rng.normal(size=(3, 5)))
    x.data[np.abs(x.data) < 1e-3] = 0.5
    p = probe(rng, (3, 5))
    assert grad_check(lambda x: (activation(x, kind) * p).sum(), [x]) < TOL


# --- bce --------------------------------------------------------------------

def test_bce_values():
    assert bce(t([0.5]), [1.0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce(t([1 - EPS, EPS]), [1.0, 0.0]).item() <= -math.log(1 - EPS) + 1e-15
    with pytest.raises(ContractError):
        bce(t([0.5]), [1.5])


def test_bce_against_scalar_loop(rng):
    p = rng.uniform(0.01, 0.99, size=(2, 1, 4, 4))
    y = rng.uniform(size=p.shape)
    ref = sum(-(yy * math.log(pp) + (1 - yy) * math.log(1 - pp)) for pp, yy in zip(p.ravel(), y.ravel())) / p.size
    assert bce(t(p), y).item() == pytest.approx(ref, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_bce_non_negative(ps, ys):
    n = min(len(ps), len(ys))
    assert bce(t(ps[:n]), np.asarray(ys[:n])).item() >= 0.0


def test_bce_sigmoid_conv_gradcheck(rng):
    x = t(rng.normal(size=(1, 3, 8, 8)))
    k = t(rng.normal(size=(2, 3, 3, 3)) * 0.3)
    y = rng.integers(0, 2, size=(1, 2, 8, 8)).astype(float)
    assert grad_check(lambda x, k: bce(sigmoid(conv2d(x, k)), y), [x, k]) < TOL


# --- autodiff plumbing -------------------------------------------------------

def test_grad_check_linear_and_square():
    x = t(np.random.default_rng(0).normal(size=(3, 4)))
    assert grad_check(lambda x: x.sum(), [x]) < 1e-9
    y = t(np.ones(5))
    assert grad_check(lambda y: (y * y).sum(), [y]) < 1e-8
    np.testing.assert_allclose(y.grad, 2.0)
    with pytest.raises(ContractError):
        grad_check(lambda y: y * 2.0, [t(np.ones(3))])


def test_shared_node_visited_once():
    x = t([2.0])
    x.requires_grad = True
    y = x * 3.0
    z = y * y + y
    order = topological_order(z)
    assert len(order) == len({id(n) for n in order})
    z.sum().backward()
    assert x.grad[0] == pytest.approx(2 * 6.0 * 3.0 + 3.0)


def test_no_grad_records_nothing():
    x = t([1.0])
    x.requires_grad = True
    with no_grad():
        y = relu(x) * 2.0
    assert not y.requires_grad and y.is_leaf


def test_forward_is_bitwise_deterministic(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    k = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
    a = max_pool2d(relu(conv2d(x, k))).data
    b = max_pool2d(relu(conv2d(x, k))).data
    assert a.tobytes() == b.tobytes()


# --- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    p = {"w": t([1.0, -2.0])}
    state = AdamState(lr=1e-3, weight_decay=0.0)
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    p = {"w": t([0.5])}
    state = AdamState(lr=0.001, eps=1e-8)
    adam_step(p, {"w": np.array([1.0])}, state)
    # m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    assert p["w"].data[0] - 0.5 == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_weight_decay_is_added_to_gradient():
    p = {"w": t([2.0])}
    state = AdamState(lr=0.1, weight_decay=0.5)
    adam_step(p, {"w": np.array([0.0])}, state)
    # effective gradient 1.0 -> first step moves by lr
    assert p["w"].data[0] == pytest.approx(2.0 - 0.1 / (1 + 1e-8))


def test_adam_deterministic_and_missing_grad():
    def run():
        p = {"w": t([0.3, 0.1])}
        opt = Adam(p, lr=0.01)
        for g in ([1.0, -1.0], [0.5, 0.2]):
            p["w"].grad = np.array(g)
            opt.step()
        return p["w"].data
    np.testing.assert_array_equal(run(), run())
    opt = Adam({"w": t([1.0])}, lr=0.1)
    with pytest.raises(ContractError):
        opt.step()
