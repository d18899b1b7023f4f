"""Dense NCHW layer math with hand-written backward passes.

Every function here is dtype-preserving: the model runs in float32, while the
finite-difference checks feed float64 copies through the same code.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def _check4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


# --------------------------------------------------------------------------
# parameter / state containers
# --------------------------------------------------------------------------

@dataclass
class ConvParams:
    weights: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got {self.weights.shape}")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_c={self.weights.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weights.shape[2:]
        num_h = h + 2 * self.padding - kh
        num_w = w + 2 * self.padding - kw
        # trailing rows/cols that do not fill a whole stride are dropped
        if num_h < 0 or num_w < 0:
            raise ShapeError(
                f"input spatial size {(h, w)} incompatible with kernel {(kh, kw)}, "
                f"padding {self.padding}, stride {self.stride}")
        return num_h // self.stride + 1, num_w // self.stride + 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.9,
               epsilon: float = 1e-5) -> "BatchNormParams":
        return cls(gamma=np.ones(channels, dtype), beta=np.zeros(channels, dtype),
                   running_mean=np.zeros(channels, dtype),
                   running_var=np.ones(channels, dtype),
                   momentum=momentum, epsilon=epsilon)


@dataclass
class RmsPropState:
    s: np.ndarray
    decay: float = 0.9
    learning_rate: float = 1e-4
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **hyper) -> "RmsPropState":
        return cls(s=np.zeros_like(param), **hyper)


@dataclass
class LossValue:
    value: float
    grad_wrt_logit: np.ndarray = field(repr=False)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (n, c, h, w) into rows of (n*ho*wo, c*kh*kw) patches."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _check_conv(x: np.ndarray, params: ConvParams) -> tuple[int, int]:
    _check4(x)
    if x.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but weights shape "
            f"{params.weights.shape} expects {params.weights.shape[1]}")
    return params.output_hw(x.shape[2], x.shape[3])


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    _check_conv(x, params)
    _, _, kh, kw = params.weights.shape
    return conv2d_from_cols(im2col(x, kh, kw, params.stride, params.padding), params, x.shape)


def conv2d_from_cols(cols: np.ndarray, params: ConvParams, input_shape) -> np.ndarray:
    """Finish a convolution given the im2col matrix of an input of ``input_shape``."""
    n, c, h, w = input_shape
    if c != params.weights.shape[1]:
        raise ShapeError(f"input shape {tuple(input_shape)} does not match weights shape "
                         f"{params.weights.shape}")
    ho, wo = params.output_hw(h, w)
    out_c = params.weights.shape[0]
    out = cols @ params.weights.reshape(out_c, -1).T + params.bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, params: ConvParams, upstream: np.ndarray,
                    cols: np.ndarray | None = None):
    """Gradients of ``sum(conv2d(x) * upstream)`` w.r.t. input, weights and bias.

    ``cols`` may carry the im2col matrix from the forward pass to skip
    recomputing it.
    """
    ho, wo = _check_conv(x, params)
    n, c, h, w = x.shape
    out_c, _, kh, kw = params.weights.shape
    if upstream.shape != (n, out_c, ho, wo):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match conv output shape "
            f"{(n, out_c, ho, wo)}")
    if cols is None:
        cols = im2col(x, kh, kw, params.stride, params.padding)
    g = upstream.transpose(0, 2, 3, 1).reshape(-1, out_c)
    grad_w = (g.T @ cols).reshape(params.weights.shape)
    grad_b = upstream.sum(axis=(0, 2, 3))

    dcols = (g @ params.weights.reshape(out_c, -1)).reshape(n, ho, wo, c, kh, kw)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (n, c, kh, kw, ho, wo)
    p, s = params.padding, params.stride
    dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return np.ascontiguousarray(dx), grad_w, grad_b


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2(x: np.ndarray):
    """2x2 non-overlapping max pool.

    Returns the pooled tensor and the winning position of each window as an
    integer in 0..3 (row-major within the window; ties go to the first).
    """
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got shape {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward(argmax: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if argmax.shape != upstream.shape:
        raise ShapeError(
            f"argmax shape {argmax.shape} does not match upstream shape {upstream.shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() > 3):
        raise IndexError("argmax index outside the 2x2 window; forward/backward pairing corrupted")
    n, c, ho, wo = upstream.shape
    onehot = argmax[..., None] == np.arange(4, dtype=argmax.dtype)
    g = np.where(onehot, upstream[..., None], upstream.dtype.type(0))
    g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, 2 * ho, 2 * wo))


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def batchnorm(x: np.ndarray, params: BatchNormParams, mode: str = "train",
              update_stats: bool = True):
    """Per-channel batch normalization.

    In train mode the running statistics on ``params`` are updated in place
    (unless ``update_stats`` is false) and a cache for the backward pass is
    returned alongside the output; infer mode returns ``(out, None)``.
    """
    _check4(x)
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ShapeError(f"input shape {x.shape} does not match batchnorm channels "
                         f"{params.gamma.shape[0]}")
    shape = (1, c, 1, 1)
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
        scale = (params.gamma * inv_std).astype(x.dtype)
        shift = (params.beta - params.running_mean * params.gamma * inv_std).astype(x.dtype)
        return x * scale.reshape(shape) + shift.reshape(shape), None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ShapeError(f"train-mode batchnorm needs >= 2 values per channel, got shape {x.shape}")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(shape)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + x.dtype.type(params.epsilon))).astype(x.dtype)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * params.gamma.astype(x.dtype).reshape(shape) + params.beta.astype(x.dtype).reshape(shape)
    if update_stats:
        m = params.momentum
        params.running_mean = (m * params.running_mean + (1 - m) * mean).astype(params.running_mean.dtype)
        params.running_var = (m * params.running_var + (1 - m) * var).astype(params.running_var.dtype)
    return out, BatchNormCache(xhat=xhat, inv_std=inv_std, gamma=params.gamma.astype(x.dtype))


def batchnorm_backward(cache: BatchNormCache, upstream: np.ndarray):
    if upstream.shape != cache.xhat.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match forward shape "
                         f"{cache.xhat.shape}")
    shape = (1, -1, 1, 1)
    xhat = cache.xhat
    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_beta = upstream.sum(axis=(0, 2, 3))
    grad_gamma = (upstream * xhat).sum(axis=(0, 2, 3))
    dxhat = upstream * cache.gamma.reshape(shape)
    dx = (cache.inv_std.reshape(shape) / count) * (
        count * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape))
    return dx, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# elementwise / dense
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    return np.where(x > 0, upstream, upstream.dtype.type(0))


def linear(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weights "
                         f"shape {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weights {weights.shape}")
    return x @ weights + bias


def linear_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray):
    if upstream.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"linear: upstream shape {upstream.shape} does not match output "
                         f"{(x.shape[0], weights.shape[1])}")
    return upstream @ weights.T, x.T @ upstream, upstream.sum(axis=0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logit(logits, labels) -> LossValue:
    """Mean binary cross entropy on raw logits, in log-sum-exp form."""
    z = np.atleast_1d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if z.shape != y.shape:
        raise ShapeError(f"logits shape {z.shape} does not match labels shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    per_sample = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.shape[0]
    return LossValue(value=float(per_sample.mean()), grad_wrt_logit=(sigmoid(z) - y) / n)


def rmsprop_step(param: np.ndarray, grad: np.ndarray, state: RmsPropState) -> np.ndarray:
    """One in-place RMSProp update; returns ``param`` for convenience."""
    if param.shape != grad.shape or state.s.shape != param.shape:
        raise ShapeError(f"rmsprop: param {param.shape}, grad {grad.shape}, state "
                         f"{state.s.shape} must agree")
    dt = param.dtype.type
    state.s *= dt(state.decay)
    state.s += dt(1 - state.decay) * grad * grad
    param -= dt(state.learning_rate) * grad / (np.sqrt(state.s) + dt(state.epsilon))
    return param


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                       epsilon: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` evaluated in float64."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(x))
        flat[i] = orig - epsilon
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * epsilon)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradient_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                   epsilon: float = 1e-3) -> float:
    """Max relative error between ``analytic`` and central differences of ``f`` at ``x``."""
    numeric = numerical_gradient(f, x, epsilon)
    if np.shape(analytic) != numeric.shape:
        raise ShapeError(f"analytic gradient shape {np.shape(analytic)} != input shape {numeric.shape}")
    return relative_error(analytic, numeric)
