"""
Layer-level differentiable operations built on the tensor tape:
matrix multiplication, im2col convolution, pooling, norms and the
softmax cross-entropy loss.
"""

from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Function, Tensor, as_tensor, reshape, transpose


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a, b) -> Tensor:
    """
    Multiply two matrices, c[i, j] = sum_k a[i, k] * b[k, j].

    Raises:
        DimensionError: If the operands are not matrices with matching inner extents
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return MatMul.apply(a, b)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Im2Col(Function):
    """Unfold (B, C, H, W) into patch rows (B * H' * W', C * kh * kw)."""

    def forward(self, x, kh=1, kw=1, stride=1, padding=0):
        self.x_shape = x.shape
        self.kh, self.kw, self.stride, self.padding = kh, kw, stride, padding
        batch, channels, height, width = x.shape
        self.out_h = conv_output_size(height, kh, stride, padding)
        self.out_w = conv_output_size(width, kw, stride, padding)

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        windows = windows[:, :, :self.out_h, :self.out_w]
        # (B, C, H', W', kh, kw) -> (B, H', W', C, kh, kw)
        windows = windows.transpose(0, 2, 3, 1, 4, 5)
        return windows.reshape(batch * self.out_h * self.out_w, channels * kh * kw)

    def backward(self, grad):
        batch, channels, height, width = self.x_shape
        s, p = self.stride, self.padding
        cols = grad.reshape(batch, self.out_h, self.out_w, channels, self.kh, self.kw)
        cols = cols.transpose(0, 3, 4, 5, 1, 2)
        padded = np.zeros((batch, channels, height + 2 * p, width + 2 * p))
        for i in range(self.kh):
            for j in range(self.kw):
                padded[:, :, i:i + s * self.out_h:s, j:j + s * self.out_w:s] += cols[:, :, i, j]
        return (padded[:, :, p:p + height, p:p + width],)


def im2col(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col expects a 4-d input, got {x.shape}")
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}"
        )
    return Im2Col.apply(x, kh=kh, kw=kw, stride=stride, padding=padding)


def _default_dot(patches: Tensor, weight: Tensor) -> Tensor:
    return matmul(patches, transpose(weight))


def conv2d(x, w, stride: int = 1, padding: int = 0,
           dot: Optional[Callable[[Tensor, Tensor], Tensor]] = None) -> Tensor:
    """
    2-d convolution as im2col followed by a single matrix multiplication.

    The dot product runs through `dot(patches, weight_rows)`, where patches is
    (B * H' * W', N) and weight_rows is (O, N) with N = C * kh * kw. Noise
    models plug in here, so convolution sees exactly the same noisy dot product
    as a dense layer.

    Args:
        x: Input (B, C, H, W)
        w: Kernel (O, C, kh, kw)
        stride: Step between patches
        padding: Zero padding on each spatial border
        dot: Optional replacement for the clean dot product

    Returns:
        Output (B, O, H', W')
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    out_channels, _, kh, kw = w.shape
    patches = im2col(x, kh, kw, stride, padding)
    rows = reshape(w, (out_channels, -1))
    out = (dot or _default_dot)(patches, rows)

    batch = x.shape[0]
    out_h = conv_output_size(x.shape[2], kh, stride, padding)
    out_w = conv_output_size(x.shape[3], kw, stride, padding)
    out = reshape(out, (batch, out_h, out_w, out_channels))
    return transpose(out, (0, 3, 1, 2))


class _Pool2d(Function):
    def _windows(self, x, kernel, stride):
        self.x_shape = x.shape
        self.kernel, self.stride = kernel, stride
        windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        self.out_h, self.out_w = windows.shape[2], windows.shape[3]
        return windows.reshape(*windows.shape[:4], kernel * kernel)

    def _scatter(self, per_position):
        # per_position(i, j) gives the gradient share of kernel offset (i, j)
        k, s = self.kernel, self.stride
        out = np.zeros(self.x_shape)
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + s * self.out_h:s, j:j + s * self.out_w:s] += per_position(i, j)
        return out


class MaxPool2d(_Pool2d):
    def forward(self, x, kernel=2, stride=2):
        windows = self._windows(x, kernel, stride)
        self.argmax = windows.argmax(axis=-1)
        return windows.max(axis=-1)

    def backward(self, grad):
        k = self.kernel
        return (self._scatter(lambda i, j: grad * (self.argmax == i * k + j)),)


class AvgPool2d(_Pool2d):
    def forward(self, x, kernel=2, stride=2):
        windows = self._windows(x, kernel, stride)
        return windows.mean(axis=-1)

    def backward(self, grad):
        share = grad / (self.kernel * self.kernel)
        return (self._scatter(lambda i, j: share),)


def _check_pool(x: Tensor, kernel: int):
    if x.ndim != 4:
        raise DimensionError(f"pooling expects a 4-d input, got {x.shape}")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise DimensionError(f"pool kernel {kernel} larger than input {x.shape[2]}x{x.shape[3]}")


def max_pool2d(x, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    _check_pool(x, kernel)
    return MaxPool2d.apply(x, kernel=kernel, stride=stride or kernel)


def avg_pool2d(x, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    _check_pool(x, kernel)
    return AvgPool2d.apply(x, kernel=kernel, stride=stride or kernel)


class L2Norm(Function):
    def forward(self, x, axis=-1):
        self.x = x
        self.axis = axis
        self.norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
        return np.squeeze(self.norm, axis=axis)

    def backward(self, grad):
        safe = np.where(self.norm > 0, self.norm, 1.0)
        # zero vectors get the zero subgradient
        return (np.expand_dims(grad, self.axis) * np.where(self.norm > 0, self.x / safe, 0.0),)


def l2_norm(x, axis: int = -1) -> Tensor:
    return L2Norm.apply(x, axis=axis)


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        self.probs = np.exp(log_probs)
        self.labels = labels
        rows = np.arange(logits.shape[0])
        return np.asarray(-log_probs[rows, labels].mean())

    def backward(self, grad):
        batch = self.probs.shape[0]
        delta = self.probs.copy()
        delta[np.arange(batch), self.labels] -= 1.0
        return (grad * delta / batch,)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """
    Mean negative log-likelihood of integer labels under softmax(logits).

    Raises:
        DimensionError: If logits are not (B, classes) or labels are not (B,)
        ContractError: If a label lies outside [0, classes)
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy shapes: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)
