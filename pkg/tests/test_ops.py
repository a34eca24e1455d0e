"""Structured ops: conv/norm/pool/gather values against brute-force oracles,
and gradients against central differences."""

import numpy as np
import pytest

from hazeprior import ops
from hazeprior import tensor as T
from hazeprior.errors import ShapeError
from hazeprior.gradcheck import grad_check
from hazeprior.tensor import Tensor

TOL = 1e-4


def leaf(arr):
    return Tensor(arr, requires_grad=True)


def conv2d_ref(x, w, b=None, stride=1, pad=0):
    """Direct-summation convolution oracle (cross-correlation)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, ci, yi * stride + i, xi * stride + j] * w[oi, ci, i, j]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv_identity_delta_kernel(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), stride=1, pad=1)
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv_matches_direct_summation(rng, stride, pad, k):
    x = rng.normal(size=(2, 3, 7, 8))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    want = conv2d_ref(x, w, b, stride=stride, pad=pad)
    assert got.shape == want.shape
    assert np.allclose(got, want, atol=1e-12)


def test_conv_channel_mismatch_names_shapes():
    x = Tensor(np.ones((1, 3, 4, 4)))
    w = Tensor(np.ones((2, 5, 3, 3)))
    with pytest.raises(ShapeError) as ei:
        ops.conv2d(x, w, Tensor(np.zeros(2)))
    msg = str(ei.value)
    assert "(1, 3, 4, 4)" in msg and "(2, 5, 3, 3)" in msg


@pytest.mark.parametrize("seed", range(10))
def test_grad_conv(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(2, 2, 5, 4)))
    w = leaf(r.normal(size=(3, 2, 3, 3)))
    b = leaf(r.normal(size=3))
    proj = Tensor(r.normal(size=(2, 3, 3, 2)))

    def f(x, w, b):
        return T.mul(ops.conv2d(x, w, b, stride=2, pad=1), proj).sum()

    assert grad_check(f, [x, w, b]) < TOL


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def test_instance_norm_two_value_slice():
    # {-1, 1}: mean 0, var 1 -> scaled by 1/sqrt(1 + eps) before affine
    x = Tensor(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
    out = ops.instance_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)))
    expect = 1.0 / np.sqrt(1.0 + ops.NORM_EPS)
    assert np.allclose(out.data.ravel(), [-expect, expect], atol=1e-15)


def test_instance_norm_standardizes(rng):
    # variance >= ~10 keeps the eps bias inside 1e-6
    x = rng.normal(size=(2, 3, 8, 8)) * 6.0 + 5.0
    out = ops.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    mu = out.mean(axis=(2, 3))
    var = out.var(axis=(2, 3))
    assert np.all(np.abs(mu) < 1e-12)
    assert np.all(np.abs(var - 1.0) < 1e-6)


def test_layer_norm_standardizes_channels(rng):
    x = rng.normal(size=(2, 16, 4, 4)) * 8.0 - 3.0
    out = ops.layer_norm_chan(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    mu = out.mean(axis=1)
    var = out.var(axis=1)
    assert np.all(np.abs(mu) < 1e-12)
    assert np.all(np.abs(var - 1.0) < 1e-6)


def test_norm_affine_applied(rng):
    x = rng.normal(size=(1, 2, 4, 4)) * 4
    gain = np.array([2.0, 0.5])
    offset = np.array([1.0, -1.0])
    base = ops.instance_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    out = ops.instance_norm(Tensor(x), Tensor(gain), Tensor(offset)).data
    assert np.allclose(out, base * gain.reshape(1, 2, 1, 1) + offset.reshape(1, 2, 1, 1))


@pytest.mark.parametrize("seed", range(10))
def test_grad_norms(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(2, 3, 4, 4)) * 3)
    gain = leaf(r.normal(size=3) + 2)
    off = leaf(r.normal(size=3))
    proj = Tensor(r.normal(size=(2, 3, 4, 4)))

    def f_in(x, gain, off):
        return T.mul(ops.instance_norm(x, gain, off), proj).sum()

    def f_ln(x, gain, off):
        return T.mul(ops.layer_norm_chan(x, gain, off), proj).sum()

    assert grad_check(f_in, [x, gain, off]) < TOL
    for t in (x, gain, off):
        t.zero_grad()
    assert grad_check(f_ln, [x, gain, off]) < TOL


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------


def test_avg_pool_2x2_block():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert ops.avg_pool2x2(x).data.ravel()[0] == 2.5


def test_avg_pool_odd_extent_rejected():
    with pytest.raises(ShapeError):
        ops.avg_pool2x2(Tensor(np.ones((1, 1, 3, 4))))


def test_global_avg_pool(rng):
    x = rng.normal(size=(2, 3, 5, 7))
    out = ops.global_avg_pool(Tensor(x)).data
    assert out.shape == (2, 3, 1, 1)
    assert np.allclose(out.ravel(), x.mean(axis=(2, 3)).ravel())


def test_upsample_nearest_duplicates(rng):
    x = rng.normal(size=(1, 2, 3, 2))
    up = ops.upsample_nearest2x(Tensor(x)).data
    assert up.shape == (1, 2, 6, 4)
    assert np.array_equal(up[..., ::2, ::2], x)
    assert np.array_equal(up[..., 1::2, 1::2], x)


def test_pool_then_upsample_constant_fixed_point():
    x = Tensor(np.full((1, 1, 4, 4), 3.25))
    back = ops.upsample_nearest2x(ops.avg_pool2x2(x))
    assert np.array_equal(back.data, x.data)


@pytest.mark.parametrize("seed", range(10))
def test_grad_pools(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(2, 2, 4, 6)))
    p1 = Tensor(r.normal(size=(2, 2, 2, 3)))
    p2 = Tensor(r.normal(size=(2, 2, 8, 12)))
    assert grad_check(lambda t: T.mul(ops.avg_pool2x2(t), p1).sum(), [x]) < TOL
    x.zero_grad()
    assert grad_check(lambda t: T.mul(ops.upsample_nearest2x(t), p2).sum(), [x]) < TOL
    x.zero_grad()
    assert grad_check(lambda t: ops.global_avg_pool(t).sum(), [x]) < TOL


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------


def test_take_last_gathers(rng):
    x = rng.normal(size=(2, 3, 10))
    idx = np.array([[0, 9], [4, 4]])
    out = ops.take_last(Tensor(x), idx).data
    assert out.shape == (2, 3, 2, 2)
    assert np.array_equal(out, x[..., idx])


def test_take_last_duplicate_scatter_accumulates():
    x = leaf(np.zeros((1, 5)))
    idx = np.array([2, 2, 2, 0])
    ops.take_last(x, idx).sum().backward()
    assert np.array_equal(x.grad.ravel(), [1.0, 0.0, 3.0, 0.0, 0.0])


def test_take_last_out_of_range():
    with pytest.raises(ShapeError):
        ops.take_last(Tensor(np.zeros((2, 4))), np.array([4]))


@pytest.mark.parametrize("seed", range(10))
def test_grad_take_last(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(2, 2, 8)))
    idx = r.integers(0, 8, size=(3, 4))
    proj = Tensor(r.normal(size=(2, 2, 3, 4)))
    assert grad_check(lambda t: T.mul(ops.take_last(t, idx), proj).sum(), [x]) < TOL


def test_linear_bias(rng):
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=5)
    out = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(out, x @ w + b)
