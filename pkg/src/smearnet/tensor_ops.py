"""Differentiable primitives over dense NCHW arrays.

Tensors are plain numpy arrays. Parameters and activations are stored as
float32; every kernel promotes to float64 for its arithmetic and casts the
result back to the dtype of its inputs, so float64 callers (gradient checks)
get float64 results end to end.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def _out_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float32)


@dataclass
class ConvParams:
    weights: np.ndarray  # (out_ch, in_ch, kH, kW)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match out_ch {self.weights.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _check_conv(x, p):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be N,C,H,W; got shape {x.shape}")
    out_ch, in_ch, kh, kw = p.weights.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv input has {x.shape[1]} channels, weights expect {in_ch}")
    H = x.shape[2] + 2 * p.padding
    W = x.shape[3] + 2 * p.padding
    if H < kh or W < kw:
        raise ShapeError(
            f"padded input {H}x{W} is smaller than the {kh}x{kw} kernel")
    return (H - kh) // p.stride + 1, (W - kw) // p.stride + 1


def _windows(x64, p):
    kh, kw = p.weights.shape[2:]
    if p.padding:
        pad = p.padding
        x64 = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(x64, (kh, kw), axis=(2, 3))
    return cols[:, :, ::p.stride, ::p.stride]  # N,C,OH,OW,kH,kW


def conv2d_forward(x, p):
    """Cross-correlate ``x`` with ``p.weights`` and add the per-channel bias.

    Output shape is ``(N, out_ch, (H + 2*pad - kH)//stride + 1, ...)``.
    """
    _check_conv(x, p)
    cols = _windows(x.astype(np.float64, copy=False), p)
    w64 = p.weights.astype(np.float64, copy=False)
    out = np.tensordot(cols, w64, axes=([1, 4, 5], [1, 2, 3]))  # N,OH,OW,F
    out = out.transpose(0, 3, 1, 2) + p.bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=_out_dtype(x, p.weights))


def conv2d_backward(x, p, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)`` for ``conv2d_forward``."""
    oh, ow = _check_conv(x, p)
    expected = (x.shape[0], p.weights.shape[0], oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {expected}")
    dt = _out_dtype(x, p.weights, grad_out)
    g = grad_out.astype(np.float64, copy=False)
    w64 = p.weights.astype(np.float64, copy=False)
    cols = _windows(x.astype(np.float64, copy=False), p)

    grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # F,C,kH,kW
    grad_b = g.sum(axis=(0, 2, 3))

    kh, kw = w64.shape[2:]
    s, pad = p.stride, p.padding
    N, C, H, W = x.shape
    gcols = np.tensordot(g, w64, axes=([1], [0]))  # N,OH,OW,C,kH,kW
    gx = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return (np.ascontiguousarray(gx, dtype=dt), grad_w.astype(dt), grad_b.astype(dt))


@dataclass
class PoolIndices:
    """Winning input position (flat index into the H*W plane) for every pooling window."""
    input_shape: tuple
    flat: np.ndarray  # int64, shape of the pooled output


def maxpool3x3(x, stride):
    """3x3 max-pooling without padding. Ties go to the lowest flat index."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool input must be N,C,H,W; got shape {x.shape}")
    N, C, H, W = x.shape
    if H < 3 or W < 3:
        raise ShapeError(f"maxpool input {H}x{W} is smaller than the 3x3 window")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh, ow = (H - 3) // stride + 1, (W - 3) // stride + 1
    win = sliding_window_view(x, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(N, C, oh, ow, 9)
    local = win.argmax(axis=-1)  # first maximum wins
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // 3
    cols = np.arange(ow)[None, :] * stride + local % 3
    return np.ascontiguousarray(out), PoolIndices(x.shape, rows * W + cols)


def maxpool_backward(indices, grad_out):
    """Route ``grad_out`` back to the winning positions; collisions are summed."""
    if grad_out.shape != indices.flat.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match pooling indices {indices.flat.shape}")
    N, C, H, W = indices.input_shape
    plane = np.arange(N * C).reshape(N, C, 1, 1) * (H * W)
    flat = (indices.flat + plane).ravel()
    gx = np.bincount(flat, weights=grad_out.astype(np.float64).ravel(), minlength=N * C * H * W)
    return gx.reshape(N, C, H, W).astype(_out_dtype(grad_out))


def batchnorm_forward(x, p, mode):
    """Per-channel normalization over (N, H, W).

    In ``"train"`` mode batch statistics are used and ``p``'s running
    statistics are updated in place; returns ``(out, cache)``. In
    ``"infer"`` mode the running statistics are used and the cache is None.
    """
    C = x.shape[1]
    if p.gamma.shape != (C,):
        raise ShapeError(f"batchnorm expects {p.gamma.shape[0]} channels, input has {C}")
    dt = _out_dtype(x, p.gamma)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    x64 = x.astype(np.float64, copy=False)
    gamma = p.gamma.astype(np.float64).reshape(bshape)
    beta = p.beta.astype(np.float64).reshape(bshape)
    if mode == "infer":
        mean = p.running_mean.astype(np.float64).reshape(bshape)
        var = p.running_var.astype(np.float64).reshape(bshape)
        out = (x64 - mean) / np.sqrt(var + p.epsilon) * gamma + beta
        return out.astype(dt), None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    count = x.size // C
    mean = x64.mean(axis=axes, keepdims=True)
    centered = x64 - mean
    var = (centered ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = centered * inv_std
    out = xhat * gamma + beta

    m = p.momentum
    unbiased = var.ravel() * (count / (count - 1)) if count > 1 else var.ravel()
    p.running_mean[...] = (1 - m) * p.running_mean + m * mean.ravel()
    p.running_var[...] = (1 - m) * p.running_var + m * unbiased
    return out.astype(dt), (xhat, inv_std, gamma, axes, dt)


def batchnorm_backward(cache, grad_out):
    """Return ``(grad_input, grad_gamma, grad_beta)`` for a train-mode forward."""
    xhat, inv_std, gamma, axes, dt = cache
    g = grad_out.astype(np.float64, copy=False)
    grad_beta = g.sum(axis=axes)
    grad_gamma = (g * xhat).sum(axis=axes)
    gx = g * gamma
    gx = inv_std * (gx - gx.mean(axis=axes, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
    return gx.astype(dt), grad_gamma.astype(dt), grad_beta.astype(dt)


def dense_forward(x, weights, bias):
    """Affine map ``y = W x + b`` on rows of ``x``; ``weights`` is (out, in)."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weights.shape[1]:
        raise ShapeError(f"dense input has {x2.shape[1]} features, weights expect {weights.shape[1]}")
    out = x2.astype(np.float64) @ weights.astype(np.float64).T + bias.astype(np.float64)
    return out.astype(_out_dtype(x, weights))


def dense_backward(x, weights, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)``; grad_input has ``x``'s shape."""
    x2 = x.reshape(x.shape[0], -1).astype(np.float64)
    if grad_out.shape != (x2.shape[0], weights.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match dense output")
    dt = _out_dtype(x, weights, grad_out)
    g = grad_out.astype(np.float64)
    gx = (g @ weights.astype(np.float64)).reshape(x.shape)
    return gx.astype(dt), (g.T @ x2).astype(dt), g.sum(axis=0).astype(dt)


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(logits):
    """Numerically stable softmax over axis 1."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(_out_dtype(logits))


PROB_CLAMP = 1e-7


def bce_loss(probs, labels):
    """Mean negative log-likelihood of the true class.

    Returns ``(loss, grad_logits)`` where ``grad_logits`` is the fused
    softmax + cross-entropy gradient ``(p - onehot) / N``.
    """
    labels = np.asarray(labels).astype(np.int64)
    n = probs.shape[0]
    p64 = probs.astype(np.float64)
    p_true = np.clip(p64[np.arange(n), labels], PROB_CLAMP, 1 - PROB_CLAMP)
    loss = float(-np.log(p_true).mean())
    onehot = np.zeros_like(p64)
    onehot[np.arange(n), labels] = 1.0
    return loss, ((p64 - onehot) / n).astype(_out_dtype(probs))


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` and ``grads`` are dicts of arrays keyed by parameter name.
    Moments are kept in float64.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name in sorted(grads):
        g = grads[name].astype(np.float64)
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p[...] = (p.astype(np.float64) - step).astype(p.dtype)
    return params, state
