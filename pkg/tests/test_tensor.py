"""Core tensor engine: values against closed forms, gradients against
central finite differences, graph bookkeeping invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hazeprior import tensor as T
from hazeprior.errors import NonFiniteError, ShapeError
from hazeprior.gradcheck import grad_check
from hazeprior.tensor import Tensor


def leaf(arr):
    return Tensor(arr, requires_grad=True)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_tensor_is_float64_contiguous():
    t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]


def test_add_mul_sub_values(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert np.array_equal(T.add(Tensor(a), Tensor(b)).data, a + b)
    assert np.array_equal(T.mul(Tensor(a), Tensor(b)).data, a * b)
    assert np.array_equal(T.sub(Tensor(a), Tensor(b)).data, a - b)


def test_relu_values():
    x = Tensor([-2.0, -0.0, 0.0, 3.5])
    assert np.array_equal(T.relu(x).data, [0.0, 0.0, 0.0, 3.5])


def test_gelu_matches_direct_formula(rng):
    x = rng.normal(size=17) * 3
    c, a = math.sqrt(2 / math.pi), 0.044715
    want = 0.5 * x * (1 + np.tanh(c * (x + a * x**3)))
    got = T.gelu(Tensor(x)).data
    assert np.allclose(got, want, rtol=0, atol=1e-15)


def test_sigmoid_values_and_stability():
    x = Tensor([0.0, 800.0, -800.0])
    y = T.sigmoid(x).data
    assert y[0] == 0.5
    assert y[1] == 1.0 and y[2] == pytest.approx(0.0, abs=1e-300)


def test_abs_subgradient_zero_at_zero():
    x = leaf(np.array([-2.0, 0.0, 3.0]))
    T.abs_(x).sum().backward()
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_softmax_quarter_three_quarters():
    # exp(0) = 1, exp(ln 3) = 3 -> [1/4, 3/4]
    y = T.softmax_lastdim(Tensor([0.0, math.log(3.0)])).data
    assert np.allclose(y, [0.25, 0.75], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    y = T.softmax_lastdim(Tensor(np.array(vals))).data
    assert abs(y.sum() - 1.0) < 1e-12


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(4, 7))
    a = T.softmax_lastdim(Tensor(x)).data
    b = T.softmax_lastdim(Tensor(x + 123.456)).data
    assert np.allclose(a, b, atol=1e-12)


def test_matmul_batched(rng):
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(5, 6))
    out = T.matmul(Tensor(a), Tensor(b)).data
    assert out.shape == (2, 3, 4, 6)
    assert np.allclose(out, a @ b)


def test_concat_and_reshape_roundtrip(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    cat = T.concat([Tensor(a), Tensor(b)], axis=1)
    assert np.array_equal(cat.data[:, :3], a) and np.array_equal(cat.data[:, 3:], b)
    r = T.reshape(cat, 10)
    assert np.array_equal(r.data, cat.data.reshape(10))


def test_pad_crop_inverse(rng):
    x = rng.normal(size=(1, 2, 3, 4))
    padded = T.pad2d(Tensor(x), 1, 2, 3, 0)
    assert padded.shape == (1, 2, 6, 7)
    back = T.crop2d(padded, 3, 4)
    # pad put the original at offset (1, 3); crop takes the top-left corner
    assert np.array_equal(padded.data[..., 1:4, 3:7], x)
    assert np.array_equal(back.data, padded.data[..., :3, :4])


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------


def test_backward_accumulates_over_shared_use():
    x = leaf(np.array([2.0]))
    y = T.add(T.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 5
    y.sum().backward()
    assert x.grad[0] == 5.0


def test_backward_requires_scalar():
    x = leaf(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        T.mul(x, 2.0).backward()


def test_broadcast_gradients_unbroadcast():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones((1, 3)))
    c = leaf(np.ones(()))
    T.add(T.add(a, b), c).sum().backward()
    assert a.grad.shape == (2, 3) and np.all(a.grad == 1)
    assert b.grad.shape == (1, 3) and np.all(b.grad == 2)
    assert c.grad.shape == () and c.grad == 6


def test_no_grad_prunes_graph():
    x = leaf(np.ones(3))
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_incompatible_shapes_raise_shape_error():
    with pytest.raises(ShapeError) as ei:
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_finite_checks_raise():
    big = Tensor(np.array([1e308]))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        T.mul(big, big)


def test_detach_blocks_gradient():
    x = leaf(np.array([3.0]))
    y = T.mul(x.detach(), 2.0)
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# gradients vs central differences (10 seeds per primitive)
# ---------------------------------------------------------------------------

TOL = 1e-4


def _away_from_zero(r, shape, margin=0.2):
    x = r.normal(size=shape)
    return x + np.sign(x) * margin


@pytest.mark.parametrize("seed", range(10))
def test_grad_elementwise(seed):
    r = np.random.default_rng(seed)
    shape = (2, 3, 4)
    proj = Tensor(r.normal(size=shape))
    a = leaf(_away_from_zero(r, shape))
    b = leaf(r.normal(size=shape))

    def f_mix(a, b):
        z = T.add(T.mul(a, b), T.sub(a, T.mul(b, 0.5)))
        z = T.add(T.mul(T.gelu(z), proj), T.sigmoid(z))
        return z.sum()

    assert grad_check(f_mix, [a, b]) < TOL


@pytest.mark.parametrize("seed", range(10))
def test_grad_abs_relu(seed):
    r = np.random.default_rng(100 + seed)
    a = leaf(_away_from_zero(r, (3, 5)))
    proj = Tensor(r.normal(size=(3, 5)))
    assert grad_check(lambda t: T.mul(T.abs_(t), proj).sum(), [a]) < TOL
    assert grad_check(lambda t: T.mul(T.relu(t), proj).sum(), [a]) < TOL


@pytest.mark.parametrize("seed", range(10))
def test_grad_softmax_matmul(seed):
    r = np.random.default_rng(200 + seed)
    a = leaf(r.normal(size=(2, 4, 5)))
    w = leaf(r.normal(size=(5, 3)))
    proj = Tensor(r.normal(size=(2, 4, 3)))

    def f(a, w):
        return T.mul(T.matmul(T.softmax_lastdim(a), w), proj).sum()

    assert grad_check(f, [a, w]) < TOL


@pytest.mark.parametrize("seed", range(10))
def test_grad_shape_ops(seed):
    r = np.random.default_rng(300 + seed)
    a = leaf(r.normal(size=(2, 2, 3, 4)))
    b = leaf(r.normal(size=(2, 1, 3, 4)))
    proj = Tensor(r.normal(size=(2, 3, 3, 4)))

    def f(a, b):
        cat = T.concat([a, b], axis=1)
        z = T.pad2d(cat, 1, 0, 0, 2)
        z = T.crop2d(z, 3, 4)
        z = T.transpose(z, (0, 1, 3, 2))
        z = T.reshape(z, (2, 3, 4, 3))
        return T.mul(z, T.transpose(proj, (0, 1, 3, 2))).sum()

    assert grad_check(f, [a, b]) < TOL


def test_grad_mean_reduction(rng):
    a = leaf(rng.normal(size=(3, 4)))
    assert grad_check(lambda t: T.mean(t, axis=1).sum(), [a]) < TOL
