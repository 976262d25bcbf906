"""Dense float64 kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every kernel
is a pure function of its arguments; the backward functions take whatever
the matching forward returned (or the forward inputs) and never keep state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "ConvParams",
    "as_tensor",
    "conv_output_size",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_reference",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "avgpool2d_forward",
    "avgpool2d_backward",
    "relu",
    "relu_backward",
    "fc_forward",
    "fc_backward",
    "lrn_forward",
    "lrn_backward",
    "softmax",
    "cross_entropy",
    "softmax_cross_entropy_backward",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a kernel's contract."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array with all dims >= 1."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"{name}: every dimension must be >= 1, got {arr.shape}")
    return arr


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: non-finite input")


@dataclass(frozen=True)
class ConvParams:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels) < 1:
            raise ValueError("kernel sizes and channel counts must be >= 1")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_output_size(h, self.kernel_h, self.stride, self.pad, "height"),
            conv_output_size(w, self.kernel_w, self.stride, self.pad, "width"),
        )


def conv_output_size(size: int, kernel: int, stride: int, pad: int, dim: str = "size") -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ShapeError(
            f"{dim}: kernel {kernel} larger than padded input {size + 2 * pad}"
        )
    return span // stride + 1


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, p: ConvParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be N×C×H×W, got {x.ndim} dims")
    if w.shape != (p.out_channels, p.in_channels, p.kernel_h, p.kernel_w):
        raise ShapeError(
            f"weights shape {w.shape} does not match "
            f"(out_channels, in_channels, kernel_h, kernel_w)="
            f"{(p.out_channels, p.in_channels, p.kernel_h, p.kernel_w)}"
        )
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"in_channels: input has {x.shape[1]} channels, expected {p.in_channels}"
        )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Lower N×C×H×W into a (N·Ho·Wo)×(C·kh·kw) patch matrix."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad, "height")
    wo = conv_output_size(w, kw, stride, pad, "width")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d_forward(x, weights, bias, p: ConvParams) -> np.ndarray:
    """Zero-padded 2-D cross-correlation via patch-matrix lowering."""
    x = as_tensor(x, "input")
    weights = as_tensor(weights, "weights")
    bias = as_tensor(bias, "bias")
    _check_conv_shapes(x, weights, p)
    if bias.shape != (p.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({p.out_channels},)")
    n = x.shape[0]
    cols, ho, wo = _im2col(x, p.kernel_h, p.kernel_w, p.stride, p.pad)
    out = cols @ weights.reshape(p.out_channels, -1).T + bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, p.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, weights, p: ConvParams):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    x = as_tensor(x, "input")
    weights = as_tensor(weights, "weights")
    grad_out = as_tensor(grad_out, "grad_out")
    _check_conv_shapes(x, weights, p)
    n = x.shape[0]
    cols, ho, wo = _im2col(x, p.kernel_h, p.kernel_w, p.stride, p.pad)
    if grad_out.shape != (n, p.out_channels, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != expected {(n, p.out_channels, ho, wo)}"
        )
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, p.out_channels)
    grad_w = (g.T @ cols).reshape(weights.shape)
    grad_b = g.sum(axis=0)
    dcols = g @ weights.reshape(p.out_channels, -1)
    grad_x = _col2im(dcols, x.shape, p.kernel_h, p.kernel_w, p.stride, p.pad, ho, wo)
    return grad_x, grad_w, grad_b


def conv2d_reference(x, weights, bias, p: ConvParams) -> np.ndarray:
    """Naive six-loop convolution. Slow; kept as the oracle for the fast path."""
    x = as_tensor(x, "input")
    _check_conv_shapes(x, weights, p)
    n, c, h, w = x.shape
    ho, wo = p.output_hw(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)))
    out = np.zeros((n, p.out_channels, ho, wo))
    for b in range(n):
        for k in range(p.out_channels):
            for i in range(ho):
                for j in range(wo):
                    acc = float(bias[k])
                    for ch in range(c):
                        for u in range(p.kernel_h):
                            for v in range(p.kernel_w):
                                acc += (
                                    xp[b, ch, i * p.stride + u, j * p.stride + v]
                                    * weights[k, ch, u, v]
                                )
                    out[b, k, i, j] = acc
    return out


def _pool_windows(x: np.ndarray, window: int, stride: int, pad: int, fill: float):
    n, c, h, w = x.shape
    if window > h + 2 * pad or window > w + 2 * pad:
        raise ShapeError(f"pool window {window} larger than input {h}×{w} (pad {pad})")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = (h + 2 * pad - window) // stride + 1
    wo = (w + 2 * pad - window) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.reshape(n, c, ho, wo, window * window), ho, wo


def maxpool2d_forward(x, window: int, stride: int, pad: int = 0):
    """Max pooling.

    Returns ``(output, argmax)`` where ``argmax`` holds, for every output
    cell, the flat index into the (unpadded) H×W plane of the winning input.
    Ties go to the first cell of the window in row-major order.
    """
    x = as_tensor(x, "input")
    if x.ndim != 4:
        raise ShapeError(f"input must be N×C×H×W, got {x.ndim} dims")
    n, c, h, w = x.shape
    win, ho, wo = _pool_windows(x, window, stride, pad, -np.inf)
    local = win.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    row = ((np.arange(ho) * stride)[:, None] + local // window) - pad
    col = ((np.arange(wo) * stride)[None, :] + local % window) - pad
    argmax = row * w + col
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(grad_out, argmax, input_shape) -> np.ndarray:
    """Route each output gradient to its recorded argmax; overlaps accumulate."""
    grad_out = as_tensor(grad_out, "grad_out")
    n, c, h, w = input_shape
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != argmax shape {argmax.shape}")
    grad = np.zeros((n * c, h * w))
    flat_idx = argmax.reshape(n * c, -1)
    np.add.at(grad, (np.arange(n * c)[:, None], flat_idx), grad_out.reshape(n * c, -1))
    return grad.reshape(n, c, h, w)


def avgpool2d_forward(x, window: int, stride: int, pad: int = 0) -> np.ndarray:
    """Average pooling; zero padding counts toward the divisor."""
    x = as_tensor(x, "input")
    if x.ndim != 4:
        raise ShapeError(f"input must be N×C×H×W, got {x.ndim} dims")
    win, _, _ = _pool_windows(x, window, stride, pad, 0.0)
    return win.mean(axis=-1)


def avgpool2d_backward(grad_out, input_shape, window: int, stride: int, pad: int = 0) -> np.ndarray:
    grad_out = as_tensor(grad_out, "grad_out")
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    share = grad_out / (window * window)
    for i in range(window):
        for j in range(window):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(grad_out, x) -> np.ndarray:
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def fc_forward(x, weights, bias) -> np.ndarray:
    """Affine map ``x @ W + b`` for ``x`` of shape N×D and ``W`` of shape D×M."""
    x = as_tensor(x, "input")
    if x.ndim != 2:
        raise ShapeError(f"fc input must be N×D, got shape {x.shape}")
    if weights.shape[0] != x.shape[1]:
        raise ShapeError(f"fc in_features: input has {x.shape[1]}, weights expect {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"fc bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def fc_backward(grad_out, x, weights):
    grad_out = as_tensor(grad_out, "grad_out")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def _lrn_scale(x: np.ndarray, k: float, n: int, alpha: float) -> np.ndarray:
    # window over channels [c - n//2, c + n//2], clamped at the edges
    sq = x * x
    csum = np.cumsum(sq, axis=1)
    csum = np.concatenate([np.zeros_like(csum[:, :1]), csum], axis=1)
    c = x.shape[1]
    half = n // 2
    lo = np.clip(np.arange(c) - half, 0, c)
    hi = np.clip(np.arange(c) + half + 1, 0, c)
    window_sum = csum[:, hi] - csum[:, lo]
    return k + (alpha / n) * window_sum


def lrn_forward(x, k: float = 2.0, n: int = 5, alpha: float = 1e-4, beta: float = 0.75) -> np.ndarray:
    """Across-channel local response normalization, ``a / (k + alpha/n · Σa²)^beta``."""
    x = as_tensor(x, "input")
    if x.ndim < 2:
        raise ShapeError("lrn input needs a channel axis")
    _check_finite(x, "lrn input")
    return x * _lrn_scale(x, k, n, alpha) ** (-beta)


def lrn_backward(grad_out, x, k: float = 2.0, n: int = 5, alpha: float = 1e-4, beta: float = 0.75) -> np.ndarray:
    x = as_tensor(x, "input")
    grad_out = as_tensor(grad_out, "grad_out")
    scale = _lrn_scale(x, k, n, alpha)
    # the clamped window is symmetric, so the channels that see j are j's own window
    t = grad_out * x * scale ** (-beta - 1.0)
    tsum = np.cumsum(t, axis=1)
    tsum = np.concatenate([np.zeros_like(tsum[:, :1]), tsum], axis=1)
    c = x.shape[1]
    half = n // 2
    lo = np.clip(np.arange(c) - half, 0, c)
    hi = np.clip(np.arange(c) + half + 1, 0, c)
    window_t = tsum[:, hi] - tsum[:, lo]
    return grad_out * scale ** (-beta) - (2.0 * alpha * beta / n) * x * window_t


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = as_tensor(logits, "logits")
    if z.ndim != 2:
        raise ShapeError(f"softmax expects N×C logits, got shape {z.shape}")
    _check_finite(z, "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"got {labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    return labels


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


def softmax_cross_entropy_backward(probs, labels) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(z), labels)`` with respect to ``z``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), labels] -= 1.0
    return grad / probs.shape[0]
