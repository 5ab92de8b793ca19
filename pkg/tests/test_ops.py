import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnheat import ops
from attnheat.errors import ShapeError, UsageError
from attnheat.tensor import Tensor, backward, precision


def naive_conv(x, w, b, stride, pad, dilation):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                s += w[o, c, u, v] * xp[a, c, i * stride + u * dilation,
                                                        j * stride + v * dilation]
                    out[a, o, i, j] = s
    return out


def lerp_oracle(img, oh, ow):
    """Scalar bilinear sampling at half-pixel centres, clamped."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
            x = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# conv2d ------------------------------------------------------------------------

def test_conv_identity_kernel_bit_exact():
    x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 1, 1), np.float32))
    y = ops.conv2d(x, w, Tensor(np.zeros(1, np.float32)))
    assert np.array_equal(y.data, x.data)


def test_conv_zero_weights():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
    y = ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), 1, 1)
    assert not y.data.any()


def test_conv_2x2_diff_kernel():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.array([1.0, 0.0, 0.0, -1.0]).reshape(1, 1, 2, 2)
    expected = naive_conv(x, w, None, 1, 0, 1)
    np.testing.assert_array_equal(expected, np.full((1, 1, 2, 2), -4.0))
    y = ops.conv2d(t64(x), t64(w), t64([0.0]))
    np.testing.assert_array_equal(y.data, expected)


@pytest.mark.parametrize("stride,pad,dilation", [(1, 0, 1), (1, 1, 1), (2, 1, 1),
                                                 (1, 2, 2), (2, 2, 2), (3, 0, 1)])
def test_conv_matches_nested_loops(stride, pad, dilation):
    g = np.random.default_rng(stride * 100 + pad * 10 + dilation)
    x, w, b = g.standard_normal((2, 3, 7, 6)), g.standard_normal((4, 3, 3, 3)), g.standard_normal(4)
    y = ops.conv2d(t64(x), t64(w), t64(b), stride, pad, dilation)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad, dilation), atol=1e-12)


def test_conv_output_size_formula():
    for h, k, s, p, d in [(32, 3, 1, 1, 1), (32, 3, 1, 2, 2), (7, 3, 2, 0, 1), (5, 1, 1, 0, 1)]:
        x = Tensor(np.zeros((1, 1, h, h)))
        y = ops.conv2d(x, Tensor(np.zeros((1, 1, k, k))), None, s, p, d)
        assert y.shape[2] == (h + 2 * p - d * (k - 1) - 1) // s + 1


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))), dilation=2)


def test_conv_bad_stride():
    with pytest.raises(UsageError):
        ops.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 1, 1))), stride=0)


# pooling -----------------------------------------------------------------------

def test_pool_small_examples():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert ops.pool2d(x, "max", 2).data.item() == 4.0
    assert ops.pool2d(x, "avg", 2).data.item() == 2.5


def test_maxpool_ramp_vs_window_scan():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    y = ops.pool2d(t64(x), "max", 2, 2).data
    scan = np.array([[max(x[0, 0, i:i + 2, j:j + 2].ravel()) for j in (0, 2)] for i in (0, 2)])
    np.testing.assert_array_equal(y[0, 0], scan)


def test_maxpool_tie_goes_to_first():
    x = t64(np.full((1, 1, 2, 2), 3.0), grad=True)
    backward(ops.tensor_sum(ops.pool2d(x, "max", 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_avgpool_spreads_gradient():
    x = t64(np.random.default_rng(0).standard_normal((1, 2, 4, 4)), grad=True)
    backward(ops.tensor_sum(ops.pool2d(x, "avg", 2)))
    np.testing.assert_allclose(x.grad, 0.25)


def test_pool_kernel_too_large():
    with pytest.raises(ShapeError):
        ops.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", 3)


def test_maxpool_3x3_pad1_matches_scan():
    g = np.random.default_rng(5)
    x = g.standard_normal((1, 2, 5, 5))
    y = ops.pool2d(t64(x), "max", 3, 1, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    for c in range(2):
        for i in range(5):
            for j in range(5):
                assert y[0, c, i, j] == xp[0, c, i:i + 3, j:j + 3].max()


# upsampling --------------------------------------------------------------------

def test_upsample_factor_one_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
    for mode in ("nearest", "bilinear"):
        assert np.array_equal(ops.upsample(x, 1, mode).data, x.data)


def test_upsample_nearest_single_value():
    y = ops.upsample(Tensor(np.full((1, 1, 1, 1), 7.0)), 2, "nearest")
    np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 7.0))


def test_upsample_bilinear_checkerboard():
    src = np.array([[0.0, 1.0], [1.0, 0.0]])
    y = ops.upsample(t64(src.reshape(1, 1, 2, 2)), 2, "bilinear").data[0, 0]
    np.testing.assert_allclose(y, lerp_oracle(src, 4, 4), atol=1e-15)
    np.testing.assert_allclose(y, [[0, .25, .75, 1], [.25, .375, .625, .75],
                                   [.75, .625, .375, .25], [1, .75, .25, 0]], atol=1e-15)


@pytest.mark.parametrize("h,w,oh,ow", [(3, 5, 7, 4), (4, 4, 8, 8), (2, 3, 2, 9)])
def test_resize_matches_scalar_oracle(h, w, oh, ow):
    src = np.random.default_rng(h * w).standard_normal((h, w))
    y = ops.resize_bilinear(t64(src.reshape(1, 1, h, w)), oh, ow).data[0, 0]
    np.testing.assert_allclose(y, lerp_oracle(src, oh, ow), atol=1e-12)


def test_upsample_bad_factor():
    with pytest.raises(UsageError):
        ops.upsample(Tensor(np.zeros((1, 1, 2, 2))), 0)


# activations -------------------------------------------------------------------

def test_activation_values():
    assert ops.sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(ops.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
    with precision("double"):
        s = ops.sigmoid(Tensor([1.0])).data[0]
    assert abs(s - 1.0 / (1.0 + math.exp(-1.0))) < 1e-15
    assert abs(s - 0.7310585786300049) < 1e-15


def test_sigmoid_extremes_stay_finite():
    y = ops.sigmoid(Tensor([-1000.0, 1000.0], dtype=np.float64)).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_relu_subgradient_zero_at_kink():
    x = t64([0.0, 1.0, -1.0], grad=True)
    backward(ops.tensor_sum(ops.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_unknown_activation():
    with pytest.raises(UsageError):
        ops.activate(Tensor([1.0]), "tanh")


# elementwise / dense / reductions ----------------------------------------------

def test_elementwise_identities():
    f = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert np.array_equal(ops.mul(f, Tensor(np.ones(f.shape))).data, f.data)
    assert np.array_equal(ops.add(f, Tensor(np.zeros(f.shape))).data, f.data)


def test_mul_broadcast_gradients():
    g = np.random.default_rng(3)
    a, b = g.standard_normal((2, 3, 2, 2)), g.standard_normal((3, 2, 2))
    ta, tb = t64(a, True), t64(b, True)
    backward(ops.tensor_sum(ops.mul(ta, tb)))
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, a.shape))
    np.testing.assert_allclose(tb.grad, a.sum(axis=0))


def test_scalar_operand():
    x = t64([1.0, 2.0], True)
    s = t64(3.0, True)
    backward(ops.tensor_sum(ops.mul(x, s)))
    np.testing.assert_allclose(x.grad, [3.0, 3.0])
    assert s.grad.item() == 3.0


def test_elementwise_shape_error():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_dense_examples():
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(ops.dense(t64(x), t64(np.eye(3)), t64(np.zeros(3))).data, x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(ops.dense(t64(np.zeros((3, 4))), t64(np.ones((4, 2))), t64(b)).data,
                                  np.tile(b, (3, 1)))


def test_dense_vs_naive_matmul():
    g = np.random.default_rng(1)
    x, w, b = g.standard_normal((2, 3)), g.standard_normal((3, 2)), g.standard_normal(2)
    expect = [[sum(x[i, k] * w[k, j] for k in range(3)) + b[j] for j in range(2)] for i in range(2)]
    np.testing.assert_allclose(ops.dense(t64(x), t64(w), t64(b)).data, expect, atol=1e-14)


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_global_avg_pool():
    assert ops.global_avg_pool(Tensor(np.full((1, 1, 3, 3), 2.5))).data.item() == 2.5
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert ops.global_avg_pool(t64(x)).data.item() == 2.5
    r = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    oracle = [[sum(r[n, c].ravel()) / 20 for c in range(3)] for n in range(2)]
    np.testing.assert_allclose(ops.global_avg_pool(t64(r)).data, oracle, atol=1e-14)


def test_concat_and_slice_round_trip():
    g = np.random.default_rng(0)
    xs = [Tensor(g.standard_normal((2, c, 3, 3)).astype(np.float32)) for c in (1, 3, 2)]
    cat = ops.concat_channels(xs)
    assert cat.shape == (2, 6, 3, 3)
    lo = 0
    for x in xs:
        back = ops.slice_channels(cat, lo, lo + x.shape[1])
        assert np.array_equal(back.data, x.data)
        lo += x.shape[1]
    one = ops.concat_channels(xs[:1])
    assert np.array_equal(one.data, xs[0].data)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels([Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 4, 3)))])


# softmax cross-entropy ---------------------------------------------------------

def test_softmax_ce_uniform_is_ln_k():
    with precision("double"):
        loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert abs(loss.item() - 2.302585092994046) < 1e-12


def test_softmax_ce_saturated():
    z = np.zeros((2, 10))
    z[0, 3] = z[1, 7] = 50.0
    assert ops.softmax_cross_entropy(t64(z), [3, 7]).item() < 1e-6


def test_softmax_ce_gradient_closed_form():
    z = np.random.default_rng(0).standard_normal((2, 3))
    lab = np.array([2, 0])
    t = t64(z, True)
    backward(ops.softmax_cross_entropy(t, lab))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(2), lab] -= 1
    np.testing.assert_allclose(t.grad, p / 2, atol=1e-15)


def test_softmax_ce_bad_label():
    with pytest.raises(UsageError):
        ops.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-500, 500))
def test_softmax_ce_shift_invariant(seed, c):
    g = np.random.default_rng(seed)
    z = g.standard_normal((4, 6)) * 3
    lab = g.integers(0, 6, 4)
    a = ops.softmax_cross_entropy(t64(z), lab).item()
    b = ops.softmax_cross_entropy(t64(z + c), lab).item()
    assert abs(a - b) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_finite_on_finite_inputs(seed):
    g = np.random.default_rng(seed)
    x = Tensor((g.standard_normal((1, 2, 4, 4)) * 1e3).astype(np.float32))
    w = Tensor(g.standard_normal((2, 2, 3, 3)).astype(np.float32))
    outs = [ops.conv2d(x, w, None, 1, 1), ops.pool2d(x, "max", 2), ops.pool2d(x, "avg", 2),
            ops.upsample(x, 2, "bilinear"), ops.sigmoid(x), ops.relu(x), ops.global_avg_pool(x),
            ops.softmax_cross_entropy(Tensor(x.data.reshape(2, 16)), [0, 5])]
    for y in outs:
        assert np.all(np.isfinite(y.data))
