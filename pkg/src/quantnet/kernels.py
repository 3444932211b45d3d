"""Dense-math kernels shared by the inference runtime and the train engine.

All kernels are pure functions over NHWC activations and out-first weight
layouts ([out, kh, kw, in] conv, [1, kh, kw, channels] depthwise, [out, in]
dense).  They preserve the floating dtype of their inputs, so the same code
path serves float32 inference and float64 gradient checking.

Spatial "same" padding follows the asymmetric convention of mainstream
training frameworks: total = max((ceil(n/s) - 1)*s + k - n, 0), split as
total//2 before and the remainder after.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def same_padding(h: int, w: int, kh: int, kw: int, stride: int):
    def split(n, k):
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return total // 2, total - total // 2
    return split(h, kh), split(w, kw)


def _pad_input(x: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return x
    (pt, pb), (pl, pr) = same_padding(x.shape[1], x.shape[2], kh, kw, stride)
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view (N, OH, OW, C, kh, kw) over the padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :oh, :ow]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
           stride: int = 1, padding: str = "same") -> np.ndarray:
    """Cross-correlation of NHWC input with [out, kh, kw, in] kernels."""
    out_c, kh, kw, in_c = w.shape
    if x.shape[3] != in_c:
        raise ValueError(f"conv2d: {in_c} kernel channels vs {x.shape[3]} input channels")
    xp = _pad_input(x, kh, kw, stride, padding)
    oh = -(-x.shape[1] // stride) if padding == "same" else (x.shape[1] - kh) // stride + 1
    ow = -(-x.shape[2] // stride) if padding == "same" else (x.shape[2] - kw) // stride + 1
    win = _windows(xp, kh, kw, stride, oh, ow)
    y = np.tensordot(win, w, axes=([3, 4, 5], [3, 1, 2]))
    if b is not None:
        y = y + b
    return y


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int, padding: str, has_bias: bool):
    """Gradients (dx, dw, db) of conv2d w.r.t. input, kernel and bias."""
    out_c, kh, kw, in_c = w.shape
    xp = _pad_input(x, kh, kw, stride, padding)
    n, oh, ow, _ = dy.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    dyf = np.ascontiguousarray(dy).reshape(-1, out_c)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :]
            dw[:, i, j, :] = dyf.T @ patch.reshape(-1, in_c)
            dxp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += \
                (dyf @ w[:, i, j, :]).reshape(n, oh, ow, in_c)
    if padding == "same":
        (pt, _), (pl, _) = same_padding(x.shape[1], x.shape[2], kh, kw, stride)
        dx = dxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :]
    else:
        dx = dxp
    db = dy.sum(axis=(0, 1, 2)) if has_bias else None
    return dx, dw, db


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                     stride: int = 1, padding: str = "same") -> np.ndarray:
    """Per-channel spatial convolution, kernels [1, kh, kw, channels]."""
    _, kh, kw, ch = w.shape
    if x.shape[3] != ch:
        raise ValueError(f"depthwise_conv2d: {ch} kernel channels vs {x.shape[3]} input channels")
    xp = _pad_input(x, kh, kw, stride, padding)
    oh = -(-x.shape[1] // stride) if padding == "same" else (x.shape[1] - kh) // stride + 1
    ow = -(-x.shape[2] // stride) if padding == "same" else (x.shape[2] - kw) // stride + 1
    win = _windows(xp, kh, kw, stride, oh, ow)
    y = np.einsum("nhwcij,ijc->nhwc", win, w[0])
    if b is not None:
        y = y + b
    return y


def depthwise_conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                              stride: int, padding: str, has_bias: bool):
    _, kh, kw, ch = w.shape
    xp = _pad_input(x, kh, kw, stride, padding)
    n, oh, ow, _ = dy.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :]
            dw[0, i, j, :] = (dy * patch).sum(axis=(0, 1, 2))
            dxp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += dy * w[0, i, j, :]
    if padding == "same":
        (pt, _), (pl, _) = same_padding(x.shape[1], x.shape[2], kh, kw, stride)
        dx = dxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :]
    else:
        dx = dxp
    db = dy.sum(axis=(0, 1, 2)) if has_bias else None
    return dx, dw, db


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """y = x W^T + b with kernels stored [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"dense: expects {w.shape[1]} inputs, fed {x.shape[-1]}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def dense_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, has_bias: bool):
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


def batchnorm_inference(x: np.ndarray, gamma, beta, mean, var, epsilon: float) -> np.ndarray:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel (last axis)."""
    gamma, beta, mean, var = (np.asarray(a, dtype=x.dtype) for a in (gamma, beta, mean, var))
    if gamma.shape[0] != x.shape[-1]:
        raise ValueError(f"batchnorm: arity {gamma.shape[0]} vs {x.shape[-1]} channels")
    if np.any(var < 0):
        raise ValueError("batchnorm: negative variance")
    inv = 1.0 / np.sqrt(var + np.asarray(epsilon, dtype=x.dtype))
    return gamma * (x - mean) * inv + beta


def batchnorm_train(x: np.ndarray, gamma, beta, epsilon: float):
    """Batch-statistics normalization.  Returns (y, cache, batch_mean, batch_var)."""
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv
    y = gamma * xhat + beta
    m = x.size // x.shape[-1]
    return y, (xhat, inv, gamma, m, axes), mean, var


def batchnorm_train_backward(dy: np.ndarray, cache):
    xhat, inv, gamma, m, axes = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dx = (gamma * inv / m) * (m * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 6)


def apply_activation(x: np.ndarray, kind: str | None) -> np.ndarray:
    if kind is None:
        return x
    if kind == "ReLU":
        return relu(x)
    if kind == "ReLU6":
        return relu6(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dy: np.ndarray, x: np.ndarray, kind: str | None) -> np.ndarray:
    if kind is None:
        return dy
    if kind == "ReLU":
        return dy * (x > 0)
    if kind == "ReLU6":
        return dy * ((x > 0) & (x < 6))
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean: (N, H, W, C) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: rank-4 input required, got rank {x.ndim}")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    n, h, w, c = in_shape
    return np.broadcast_to(dy[:, None, None, :] / (h * w), in_shape).copy()


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"residual_add: shapes {a.shape} vs {b.shape}")
    return a + b


def softmax_t(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, max-subtracted for stability."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = logits / np.asarray(temperature, dtype=logits.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, onehot: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.shape != onehot.shape:
        raise ValueError(f"softmax_cross_entropy: {logits.shape} logits vs {onehot.shape} labels")
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -(onehot * logp).sum() / n
    dlogits = (np.exp(logp) - onehot) / n
    return loss, dlogits
