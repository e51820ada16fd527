"""Layer primitives with hand-derived backward passes.

Every forward function returns ``(output, cache)`` and the matching backward
function consumes ``(grad_output, cache)``.  Arrays are NCHW.  The dtype of
the input is preserved, so the same code runs in float32 for training and in
float64 for gradient checking.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, DimensionError, InputError, NumericError


def _check_finite(arr, name):
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} produced non-finite values")
    return arr


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def _patches(xp, k, stride, h_out, w_out):
    # (N, Cin, k, k, Hout, Wout) so that each kernel offset is one strided copy
    # and the result feeds a batched matmul without transposes.
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=xp.dtype)
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h_span : stride, j : j + w_span : stride]
    return cols.reshape(n, c * k * k, h_out * w_out)


def conv2d_forward(x, weight, bias=None, stride=1, pad=0):
    """Zero-padded 2-D cross-correlation.

    ``x`` is ``(N, Cin, H, W)`` and ``weight`` is ``(Cout, Cin, K, K)``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if wc_in != c_in or k != k2:
        raise DimensionError(f"weight {weight.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")

    h_out = conv_output_size(h, k, stride, pad)
    w_out = conv_output_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _patches(xp, k, stride, h_out, w_out)
    out = np.matmul(weight.reshape(c_out, -1), cols)
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(n, c_out, h_out, w_out)
    _check_finite(out, "conv2d_forward")
    cache = (cols, x.shape, weight, stride, pad, bias is not None)
    return out, cache


def conv2d_backward(grad_out, cache):
    """Return ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is None without bias."""
    cols, x_shape, weight, stride, pad, has_bias = cache
    n, c_in, h, w = x_shape
    c_out, _, k, _ = weight.shape
    h_out, w_out = grad_out.shape[2:]
    if grad_out.shape != (n, c_out, h_out, w_out):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match forward")

    g = grad_out.reshape(n, c_out, h_out * w_out)
    grad_weight = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    grad_bias = g.sum(axis=(0, 2)) if has_bias else None

    dcols = np.matmul(weight.reshape(c_out, -1).T, g).reshape(n, c_in, k, k, h_out, w_out)
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h_span : stride, j : j + w_span : stride] += dcols[:, :, i, j]
    grad_input = np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w]) if pad else dxp
    _check_finite(grad_input, "conv2d_backward")
    _check_finite(grad_weight, "conv2d_backward")
    return grad_input, grad_weight, grad_bias


# --------------------------------------------------------------------------
# Batch normalisation
# --------------------------------------------------------------------------

def batchnorm_train(x, gamma, beta, running_mean, running_var, momentum_bn=0.1, eps_bn=1e-5):
    """Training-mode batch norm over ``(N, H, W)`` of each channel.

    The batch variance used for normalisation is biased; the running variance
    is updated with the unbiased estimate.  Returns ``(y, (new_mean, new_var), cache)``.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm input {x.shape} vs gamma {gamma.shape}")
    if eps_bn <= 0:
        raise InputError("eps_bn must be positive")
    n, c, h, w = x.shape
    count = n * h * w
    if count < 2:
        raise DegenerateBatchError("batch norm needs at least two elements per channel")

    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps_bn)
    xhat = centered * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    _check_finite(y, "batchnorm_train")

    new_mean = (1 - momentum_bn) * running_mean + momentum_bn * mean
    new_var = (1 - momentum_bn) * running_var + momentum_bn * var * (count / (count - 1))
    new_mean = new_mean.astype(running_mean.dtype, copy=False)
    new_var = new_var.astype(running_var.dtype, copy=False)
    return y, (new_mean, new_var), (xhat, inv_std, gamma)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps_bn=1e-5):
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm input {x.shape} vs gamma {gamma.shape}")
    scale = gamma / np.sqrt(running_var + eps_bn)
    shift = beta - running_mean * scale
    y = x * scale[None, :, None, None] + shift[None, :, None, None]
    return _check_finite(y.astype(x.dtype, copy=False), "batchnorm_eval")


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma = cache
    if grad_out.shape != xhat.shape:
        raise DimensionError(f"grad_out {grad_out.shape} vs saved {xhat.shape}")
    n, c, h, w = grad_out.shape
    count = n * h * w
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std / count)[None, :, None, None]
    grad_x = scale * (
        count * grad_out
        - grad_beta[None, :, None, None]
        - xhat * grad_gamma[None, :, None, None]
    )
    _check_finite(grad_x, "batchnorm_backward")
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# --------------------------------------------------------------------------
# Activations, pooling, linear
# --------------------------------------------------------------------------

def relu_forward(x):
    y = np.maximum(x, 0)
    return y, y > 0


def relu_backward(grad_out, cache):
    return grad_out * cache


def maxpool2d_forward(x, kernel=2, stride=2):
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"pool kernel {kernel} larger than input {h}x{w}")
    h_out = (h - kernel) // stride + 1
    w_out = (w - kernel) // stride + 1
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : stride * (h_out - 1) + 1 : stride, : stride * (w_out - 1) + 1 : stride]
    win = win.reshape(n, c, h_out, w_out, kernel * kernel)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (arg, x.shape, kernel, stride)


def maxpool2d_backward(grad_out, cache):
    arg, x_shape, kernel, stride = cache
    h_out, w_out = arg.shape[2:]
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1
    for i in range(kernel):
        for j in range(kernel):
            hit = arg == i * kernel + j
            dx[:, :, i : i + h_span : stride, j : j + w_span : stride] += grad_out * hit
    return dx


def avgpool_global_forward(x):
    if x.ndim != 4:
        raise DimensionError(f"global average pool expects 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def avgpool_global_backward(grad_out, cache):
    n, c, h, w = cache
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], cache).astype(grad_out.dtype, copy=True)


def linear_forward(x, weight, bias=None):
    """``y = x W^T + b`` with ``weight`` shaped ``(out, in)``; inputs are flattened."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear input features {x2.shape[1]} != weight in_features {weight.shape[1]}")
    y = x2 @ weight.T
    if bias is not None:
        y += bias
    _check_finite(y, "linear_forward")
    return y, (x2, x.shape, weight, bias is not None)


def linear_backward(grad_out, cache):
    x2, x_shape, weight, has_bias = cache
    grad_weight = grad_out.T @ x2
    grad_bias = grad_out.sum(axis=0) if has_bias else None
    grad_input = (grad_out @ weight).reshape(x_shape)
    return grad_input, grad_weight, grad_bias


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(denom)
    rows = np.arange(n)
    loss = -log_prob[rows, labels].mean()
    grad = exp / denom
    grad[rows, labels] -= 1
    grad /= n
    return float(loss), grad.astype(logits.dtype, copy=False)
