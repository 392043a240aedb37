import numpy as np
import pytest

from apcsim.errors import ContractError, DimensionError
from apcsim.functional import (
    avg_pool2d, conv2d, im2col, l2_norm, matmul, max_pool2d, softmax_cross_entropy,
)
from apcsim.tensor import Tensor, backward, parameter, tsum


def direct_conv(x, w, stride, padding):
    batch, channels, height, width = x.shape
    out_channels, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, out_channels, out_h, out_w))
    for b in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    patch = padded[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


class TestMatmul:
    def test_known_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError, match="matmul shape mismatch"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_gradients(self, rng, gradcheck):
        a0, b = rng.random((3, 4)), rng.random((4, 2))
        a = parameter(a0)
        backward(tsum(matmul(a, Tensor(b)) * 2.0))
        gradcheck(lambda v: float(np.sum(v @ b * 2.0)), a0, a.grad)


class TestConv:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_direct_convolution(self, rng, stride, padding):
        x, w = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride, padding)
        np.testing.assert_allclose(out.data, direct_conv(x, w, stride, padding), atol=1e-12)

    def test_patch_rows_have_contraction_length(self, rng):
        patches = im2col(Tensor(rng.random((2, 3, 5, 5))), 3, 3, stride=1, padding=0)
        assert patches.shape == (2 * 3 * 3, 3 * 3 * 3)

    def test_dot_hook_sees_patches(self, rng):
        seen = {}

        def dot(patches, rows):
            seen["shapes"] = (patches.shape, rows.shape)
            return matmul(patches, rows.T)

        conv2d(Tensor(rng.random((1, 2, 4, 4))), Tensor(rng.random((5, 2, 3, 3))), dot=dot)
        assert seen["shapes"] == ((4, 18), (5, 18))

    def test_gradients(self, rng, gradcheck):
        x0, w0 = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        weights = rng.standard_normal((1, 3, 3, 3))
        x, w = parameter(x0), parameter(w0)
        backward(tsum(conv2d(x, w, stride=2, padding=1) * weights))
        gradcheck(lambda v: float(np.sum(direct_conv(v, w0, 2, 1) * weights)), x0, x.grad)
        gradcheck(lambda v: float(np.sum(direct_conv(x0, v, 2, 1) * weights)), w0, w.grad)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channel"):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestPooling:
    def test_max_pool_forward_and_backward(self):
        x = parameter(np.arange(16.0).reshape(1, 1, 4, 4))
        out = max_pool2d(x, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])
        backward(tsum(out))
        expected = np.zeros((4, 4))
        expected[[1, 1, 3, 3], [1, 3, 1, 3]] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    def test_avg_pool_gradient(self, rng):
        x0 = rng.random((2, 1, 4, 4))
        x = parameter(x0)
        backward(tsum(avg_pool2d(x, 2) * 3.0))
        np.testing.assert_allclose(x.grad, np.full(x0.shape, 0.75))


class TestL2Norm:
    def test_zero_vector_has_zero_gradient(self):
        x = parameter([[0.0, 0.0], [3.0, 4.0]])
        out = l2_norm(x, axis=1)
        np.testing.assert_allclose(out.data, [0.0, 5.0])
        backward(tsum(out))
        np.testing.assert_allclose(x.grad, [[0.0, 0.0], [0.6, 0.8]])
        assert np.all(np.isfinite(x.grad))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
        assert loss.item() == pytest.approx(np.log(5.0))

    def test_gradient(self, rng, gradcheck):
        logits0, labels = rng.standard_normal((3, 4)), np.array([0, 3, 1])

        def f(v):
            shifted = v - v.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            return float(-log_probs[np.arange(3), labels].mean())

        logits = parameter(logits0)
        backward(softmax_cross_entropy(logits, labels))
        gradcheck(f, logits0, logits.grad)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
