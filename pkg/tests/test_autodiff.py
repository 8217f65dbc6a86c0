import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rage import autodiff as ad
from rage.autodiff import Tensor, finite_diff_check
from rage.selfcheck import FD_TOL, OP_CASES, _weighted_sum


def _rng(seed=0):
    return np.random.default_rng(seed)


def _direct_conv(x, w, b, stride, pad):
    """Seven-loop reference convolution."""
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, Co, Ho, Wo))
    for n in range(N):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv2d_identity_selection_kernel():
    x = _rng().normal(size=(1, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_hand_computed():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    out = ad.conv2d(x, w, Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 5.0


def test_conv2d_output_shape_stride_pad():
    rng = _rng()
    out = ad.conv2d(Tensor(rng.normal(size=(1, 2, 8, 8))), Tensor(rng.normal(size=(4, 2, 3, 3))),
                    Tensor(np.zeros(4)), stride=2, padding=1)
    assert out.shape == (1, 4, 4, 4)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 2)])
def test_conv2d_matches_direct_loops(stride, pad, k):
    rng = _rng(stride * 10 + pad + k)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, _direct_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_conv2d_rejects_kernel_larger_than_input():
    with pytest.raises(ValueError, match="larger than padded input"):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_linearity():
    rng = _rng(3)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    x, y = rng.normal(size=(2, 1, 3, 7, 6))
    a, b = 1.7, -0.3
    lhs = ad.conv2d(Tensor(a * x + b * y), w, None, padding=1).data
    rhs = a * ad.conv2d(Tensor(x), w, None, padding=1).data + b * ad.conv2d(Tensor(y), w, None, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ---------------------------------------------------------------------------
# upsample / elementwise / activations
# ---------------------------------------------------------------------------


def test_upsample_single():
    out = ad.upsample2x(Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data[0, 0], [[1, 1], [1, 1]])


def test_upsample_blocks():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.upsample2x(Tensor(x[None, None])).data[0, 0]
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    np.testing.assert_array_equal(out, expected)


def test_upsample_sum_is_four_times():
    x = _rng(1).normal(size=(2, 3, 5, 4))
    out = ad.upsample2x(Tensor(x)).data
    total = 0.0
    for v in out.reshape(-1):  # direct summation
        total += v
    assert total == pytest.approx(4 * x.sum(), rel=1e-12)


def test_upsample_grad_is_block_sum():
    x = Tensor(_rng(2).normal(size=(1, 2, 3, 3)), requires_grad=True)
    g = _rng(3).normal(size=(1, 2, 6, 6))
    ad.sum(ad.mul(ad.upsample2x(x), Tensor(g))).backward()
    expected = g[:, :, 0::2, 0::2] + g[:, :, 1::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 1::2]
    np.testing.assert_allclose(x.grad, expected)


def test_add_neg_zero():
    x = Tensor(_rng().normal(size=(3, 4)))
    np.testing.assert_array_equal(ad.add(x, ad.neg(x)).data, 0.0)


def test_mul_by_one_scalar():
    x = Tensor(_rng().normal(size=(3, 4)))
    np.testing.assert_array_equal(ad.mul(x, 1.0).data, x.data)


def test_mul_grad_is_other_operand():
    rng = _rng(4)
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3)))
    ad.sum(ad.mul(a, b)).backward()
    np.testing.assert_array_equal(a.grad, b.data)
    err = finite_diff_check(lambda t: ad.sum(ad.mul(t, b)), a)
    assert err <= FD_TOL


def test_binary_ops_reject_shape_mismatch():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))
    for op in (ad.add, ad.sub, ad.mul):
        with pytest.raises(ValueError, match="shape mismatch"):
            op(a, b)


def test_sigmoid_relu_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(ad.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])


def test_sigmoid_saturation_no_nan():
    x = Tensor(np.array([-40.0, 40.0]), requires_grad=True)
    s = ad.sigmoid(x)
    assert np.all(np.isfinite(s.data))
    # closed form: s(1-s) at |x| = 40 is about e^-40
    ad.sum(s).backward()
    np.testing.assert_allclose(x.grad, np.exp(-40.0), rtol=1e-6)
    assert s.data[0] > 0.0


def test_relu_tie_subgradient_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=50))
def test_sigmoid_open_interval(values):
    s = ad.sigmoid(Tensor(np.array(values))).data
    assert np.all(s > 0) and np.all(s < 1)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_relu_nonnegative(values):
    assert np.all(ad.relu(Tensor(np.array(values))).data >= 0)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_attention_single_position_returns_values():
    rng = _rng(5)
    q, k = rng.normal(size=(2, 2, 1, 4))
    v = rng.normal(size=(2, 1, 3))
    out = ad.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    np.testing.assert_array_equal(out.data, v)


def test_attention_orthonormal_large_scale_selects_rows():
    T = 4
    scale = 60.0
    q = np.eye(T)[None] * scale
    v = _rng(6).normal(size=(1, T, 3))
    out = ad.scaled_dot_attention(Tensor(q), Tensor(q), Tensor(v)).data
    # explicit softmax oracle: logits scale^2/2 on the diagonal, 0 elsewhere
    logits = np.eye(T) * scale**2 / np.sqrt(T)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out[0], p @ v[0], atol=1e-12)
    np.testing.assert_allclose(out[0], v[0], atol=1e-9)


def test_attention_rows_sum_to_one():
    rng = _rng(7)
    q, k = rng.normal(size=(2, 3, 9, 5))
    p = ad.attention_weights(q, k)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_rejects_empty_key_dim():
    z = Tensor(np.zeros((1, 3, 0)))
    with pytest.raises(ValueError, match="zero"):
        ad.scaled_dot_attention(z, z, Tensor(np.zeros((1, 3, 2))))


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(_rng().normal(size=(3, 2)), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_square_sum():
    x = Tensor(_rng().normal(size=(5,)), requires_grad=True)
    ad.sum(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.mul(x, 2.0).backward()


def test_second_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ad.sum(x)
    loss.backward()
    with pytest.raises(RuntimeError, match="already"):
        loss.backward()


def test_fan_out_accumulates():
    x = Tensor(_rng(8).normal(size=(4,)), requires_grad=True)
    w1, w2 = _rng(9).normal(size=(2, 4))
    loss = ad.add(ad.sum(ad.mul(x, Tensor(w1))), ad.sum(ad.mul(x, Tensor(w2))))
    loss.backward()
    np.testing.assert_allclose(x.grad, w1 + w2)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad


def test_determinism():
    def run():
        rng = _rng(11)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        return ad.sigmoid(ad.conv2d(x, w, None, padding=1)).data

    assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------------------
# finite-difference suite: every op, >= 10 random instances each
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name,build", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_finite_difference_per_op(name, build):
    for i in range(10):
        f, x = build(np.random.default_rng(i))
        assert finite_diff_check(f, x, eps=1e-5) <= FD_TOL, f"{name} instance {i}"


def test_finite_diff_check_sum_exact():
    x = Tensor(_rng().normal(size=(5, 3)))
    assert finite_diff_check(ad.sum, x) <= 1e-10


def test_finite_diff_check_sigmoid():
    x = Tensor(_rng(12).normal(size=(8,)))
    assert finite_diff_check(lambda t: ad.sum(ad.sigmoid(t)), x) <= 1e-6


def test_finite_diff_check_conv_sum():
    rng = _rng(13)
    w = Tensor(rng.normal(size=(1, 1, 3, 3)))
    x = Tensor(rng.normal(size=(1, 1, 5, 5)))
    assert finite_diff_check(lambda t: ad.sum(ad.conv2d(t, w, None, padding=1)), x) <= 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_property_random_conv_chain(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2, 2, 3, 3))
    R = rng.normal(size=(1, 2, 4, 4))
    f = lambda t: _weighted_sum(ad.conv2d(ad.sigmoid(t), Tensor(w), None, padding=1), R)
    assert finite_diff_check(f, Tensor(rng.normal(size=(1, 2, 4, 4)))) <= FD_TOL
