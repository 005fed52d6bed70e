import numpy as np
import pytest

import mtct.engine as en
from mtct.engine import Tape, Tensor, backward, forward_op
from mtct.errors import ContractError, DimensionError, NumericError


def test_relu_definition():
    out = en.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2))
    out = en.matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.allclose(out.data, a)


def brute_force_conv(x, w, stride, pad):
    """Independent nested-loop convolution oracle."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for ni in range(n):
        for oi in range(co):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[ni, ci, yi * stride + ky, xi * stride + kx] \
                                    * w[oi, ci, ky, kx]
                    out[ni, oi, yi, xi] = acc
    return out


def test_conv2d_all_ones():
    out = en.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)])
def test_conv2d_matches_bruteforce(stride, pad, k):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, k, k))
    out = en.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
    assert np.allclose(out.data, brute_force_conv(x, w, stride, pad), atol=1e-12)


def test_backward_relu_sum():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with Tape():
        backward(en.tsum(en.relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_backward_product_rule():
    a = Tensor([3.0], requires_grad=True)
    b = Tensor([5.0], requires_grad=True)
    with Tape():
        backward(en.tsum(en.elementwise_mul(a, b)))
    assert np.array_equal(a.grad, [5.0])
    assert np.array_equal(b.grad, [3.0])


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = en.relu(x)
        with pytest.raises(ContractError):
            backward(y)


def test_maxpool_and_global_avg_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = en.maxpool2d(Tensor(x), 2, 2)
    assert np.array_equal(out.data.ravel(), [5.0, 7.0, 13.0, 15.0])
    gap = en.global_avg_pool(Tensor(x))
    assert np.allclose(gap.data, [[7.5]])


def test_softmax_rows_uniform_and_shift_invariance():
    p = en.softmax_rows(Tensor(np.zeros((2, 4))))
    assert np.allclose(p.data, 0.25)
    rng = np.random.default_rng(3)
    z = rng.normal(size=(3, 5))
    p1 = en.softmax_rows(Tensor(z)).data
    p2 = en.softmax_rows(Tensor(z + 100.0)).data
    assert np.allclose(p1, p2, atol=1e-12)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(DimensionError, match="matmul"):
        en.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="conv2d"):
        en.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError, match="add"):
        en.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


def test_nonfinite_input_rejected():
    with pytest.raises(NumericError):
        en.log(Tensor([0.0, 1.0]))
    from mtct.engine import tensor
    with pytest.raises(NumericError):
        tensor([np.inf, 1.0])


def test_tape_replay_determinism():
    rng = np.random.default_rng(11)
    x_data = rng.normal(size=(2, 3, 8, 8))
    w_data = rng.normal(size=(4, 3, 3, 3))

    def run():
        x = Tensor(x_data.copy(), requires_grad=True)
        w = Tensor(w_data.copy(), requires_grad=True)
        with Tape():
            out = en.mean(en.relu(en.conv2d(x, w, stride=2, pad=1)))
            backward(out)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    o1, gx1, gw1 = run()
    o2, gx2, gw2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_backward_linearity():
    rng = np.random.default_rng(5)
    x_data = rng.normal(size=(3, 4))

    def grad_of_scaled(a):
        x = Tensor(x_data.copy(), requires_grad=True)
        with Tape():
            loss = en.mul_scalar(en.mean(en.exp(x)), a)
            backward(loss)
        return x.grad

    g1 = grad_of_scaled(1.0)
    g3 = grad_of_scaled(3.0)
    rel = np.abs(g3 - 3.0 * g1) / np.maximum(np.abs(g3), 1e-12)
    assert rel.max() < 1e-12


def test_grad_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    with Tape():
        backward(en.tsum(en.elementwise_mul(x, x)))  # d(x^2)/dx = 2x
    assert np.allclose(x.grad, [4.0])


def test_forward_op_dispatch():
    out = forward_op("relu", Tensor([-2.0, 3.0]))
    assert np.array_equal(out.data, [0.0, 3.0])
    with pytest.raises(ContractError):
        forward_op("fused_mega_op", Tensor([1.0]))


def test_no_tape_means_no_recording():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = en.relu(x)
    assert y.node_id is None and y.tape is None


def test_conv2d_stride_restriction():
    with pytest.raises(ContractError):
        en.conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=3)
