"""Differentiable neural-network primitives on NCHW tensors."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DegenerateBatchError, DimensionError
from .tensor import Tensor, make_result

# ---------------------------------------------------------------------------
# convolution kernels on raw arrays (cross-correlation, no kernel flip)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv output size ({size} + 2*{padding} - {kernel})/{stride} + 1 is not a positive integer")
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix [N, C*kh*kw, H'*W'] with rows ordered like ``weight.reshape(O, -1)``."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = _pad(x, padding)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto the image."""
    n, c, h, w = x_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dx)


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Return (output, patch matrix); the patches are reused for the weight gradient."""
    o, c, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, padding)
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(x.shape[0], o, ho, wo), cols


def conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`conv_forward` with respect to its input."""
    o, c, kh, kw = w.shape
    n = g.shape[0]
    dcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, -1))
    return col2im(dcols, x_shape, kh, kw, stride, padding)


def conv_weight_grad(g: np.ndarray, cols: np.ndarray, w_shape) -> np.ndarray:
    n, o = g.shape[:2]
    return np.matmul(g.reshape(n, o, -1), cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)


# ---------------------------------------------------------------------------
# differentiable ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if c != wc:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    conv_output_size(h, kh, stride, padding)
    conv_output_size(w, kw, stride, padding)
    out, cols = conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]
    if not weight.requires_grad:
        cols = None

    def grad_fn(g):
        gx = conv_input_grad(g, weight.data, x.shape, stride, padding) if x.requires_grad else None
        gw = conv_weight_grad(g, cols, weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, "conv2d", grad_fn)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is laid out [C_in, C_out, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    wc, o, kh, kw = weight.shape
    if c != wc:
        raise DimensionError(f"conv_transpose2d: input has {c} channels but weight expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv_transpose2d output size {ho}x{wo} is not positive")
    out = conv_input_grad(x.data, weight.data, (n, o, ho, wo), stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gx = conv_forward(g, weight.data, stride, padding)[0] if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = conv_weight_grad(x.data, im2col(g, kh, kw, stride, padding), weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, "conv_transpose2d", grad_fn)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ConfigurationError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    positive = x.data >= 0
    s = x.data.dtype.type(slope)
    out = np.where(positive, x.data, s * x.data)
    return make_result(out, (x,), "leaky_relu", lambda g: (np.where(positive, g, s * g),))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def batchnorm2d(x: Tensor, gamma: Tensor, beta_shift: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, momentum: float = 0.1, eps: float = 1e-5,
                training: bool = True) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (running_var tracks the unbiased
    variance).  In eval mode the running statistics are used.
    """
    if eps <= 0:
        raise ConfigurationError("batchnorm eps must be positive")
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise DimensionError(f"batchnorm2d: channel parameters must have shape ({c},)")
    dt = x.data.dtype
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DegenerateBatchError("batchnorm2d in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        count = None
        mu = running_mean.astype(dt)
        var = running_var.astype(dt)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta_shift.data[None, :, None, None]

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            dx = (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            dx = dx * inv_std[None, :, None, None]
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return make_result(out.astype(dt, copy=False), (x, gamma, beta_shift), "batchnorm2d", grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, "linear", grad_fn)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling with a square window."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if kernel < 1 or h % kernel or w % kernel:
        raise ConfigurationError(f"avg_pool2d: {h}x{w} is not divisible by kernel {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))
    scale = x.data.dtype.type(1.0 / (kernel * kernel))

    def grad_fn(g):
        return (np.repeat(np.repeat(g * scale, kernel, axis=2), kernel, axis=3),)

    return make_result(out, (x,), "avg_pool2d", grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = x.data.dtype.type(1.0 / (h * w))

    def grad_fn(g):
        return (np.broadcast_to(g * scale, x.shape).copy(),)

    return make_result(out, (x,), "global_avg_pool", grad_fn)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each sample (all non-batch entries) by max(||sample||_2, eps)."""
    flat = x.data.reshape(x.shape[0], -1)
    norm = np.sqrt((flat * flat).sum(axis=1))
    denom = np.maximum(norm, eps).astype(x.data.dtype)
    y = flat / denom[:, None]
    active = norm >= eps

    def grad_fn(g):
        g = g.reshape(flat.shape)
        proj = np.where(active, (g * y).sum(axis=1), 0)
        return (((g - proj[:, None] * y) / denom[:, None]).reshape(x.shape),)

    return make_result(y.reshape(x.shape), (x,), "l2_normalize", grad_fn)


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ConfigurationError(f"softmax temperature must be positive, got {T}")


def softmax_t(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_temperature(T)
    if logits.ndim != 2:
        raise DimensionError(f"softmax expects [N, K], got {logits.shape}")
    z = logits.data / logits.data.dtype.type(T)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)) / T,)

    return make_result(y, (logits,), "softmax", grad_fn)


def log_softmax(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_temperature(T)
    if logits.ndim != 2:
        raise DimensionError(f"log_softmax expects [N, K], got {logits.shape}")
    z = logits.data / logits.data.dtype.type(T)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def grad_fn(g):
        return ((g - probs * g.sum(axis=1, keepdims=True)) / T,)

    return make_result(out, (logits,), "log_softmax", grad_fn)
