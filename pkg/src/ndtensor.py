"""
Dense rasters and the differentiable layer kit.

A raster is a float64, C-contiguous numpy array of shape (n, c, h, w). Every
layer kind has a forward function and an analytic backward function; the
`grad_check` helper compares the latter against central finite differences.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from typing_extensions import Literal, TypeAlias

Raster: TypeAlias = np.ndarray
LayerKind = Literal["conv", "batchnorm", "leakyrelu", "maxpool", "upsample"]
Mode = Literal["train", "eval"]

LAYER_KINDS = ("conv", "batchnorm", "leakyrelu", "maxpool", "upsample")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_raster(x) -> Raster:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected a raster of shape (n, c, h, w), got shape {arr.shape}")
    return arr


@dataclass
class LayerParams:
    kind: str
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stride: int = 1
    padding: int = 0
    slope: float = 0.01
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.stride < 1 or self.padding < 0:
                raise ValueError(f"conv needs stride >= 1 and padding >= 0, got {self.stride}, {self.padding}")
            if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[0],):
                raise ValueError(
                    f"conv weights must be (c_out, c_in, k, k) with bias (c_out,), "
                    f"got {self.weights.shape} and {self.bias.shape}")
        if self.grad_weights.shape != self.weights.shape:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias.shape != self.bias.shape:
            self.grad_bias = np.zeros_like(self.bias)

    def zero_grad(self) -> None:
        self.grad_weights.fill(0.0)
        self.grad_bias.fill(0.0)


def conv_params(weights, bias, stride: int = 1, padding: int = 0) -> LayerParams:
    return LayerParams("conv", weights=np.asarray(weights, dtype=np.float64).copy(),
                       bias=np.asarray(bias, dtype=np.float64).copy(), stride=stride, padding=padding)


def batchnorm_params(channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> LayerParams:
    return LayerParams("batchnorm", weights=np.ones(channels), bias=np.zeros(channels),
                       momentum=momentum, eps=eps,
                       running_mean=np.zeros(channels), running_var=np.ones(channels))


# --- convolution ---

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x: Raster, params: LayerParams) -> tuple[np.ndarray, int, int]:
    """Sliding windows (n, c, h_out, w_out, k, k) of the padded input."""
    n, c, h, w = x.shape
    co, ci, kh, kw = params.weights.shape
    if c != ci:
        raise ValueError(f"conv input has {c} channels, weights expect {ci} (weights shape {params.weights.shape})")
    s, p = params.stride, params.padding
    if h + 2 * p < kh or w + 2 * p < kw:
        raise ValueError(f"conv kernel {kh}x{kw} larger than padded input {h + 2 * p}x{w + 2 * p}")
    h_out, w_out = conv_output_size(h, kh, s, p), conv_output_size(w, kw, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :h_out, :w_out]
    return cols, h_out, w_out


def conv2d(x: Raster, params: LayerParams) -> Raster:
    """Cross-correlation plus per-output-channel bias; output (n, c_out, h_out, w_out)."""
    x = as_raster(x)
    cols, _, _ = _windows(x, params)
    out = np.tensordot(cols, params.weights, axes=([1, 4, 5], [1, 2, 3]))  # (n, h_out, w_out, c_out)
    out = out.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_grad(x: Raster, params: LayerParams, grad_out: Raster) -> tuple[Raster, np.ndarray, np.ndarray]:
    """Gradients of <grad_out, conv2d(x)> wrt input, weights and bias."""
    x = as_raster(x)
    grad_out = as_raster(grad_out)
    cols, h_out, w_out = _windows(x, params)
    n = x.shape[0]
    co, ci, kh, kw = params.weights.shape
    if grad_out.shape != (n, co, h_out, w_out):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv output {(n, co, h_out, w_out)}")

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_weights = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))

    s, p = params.stride, params.padding
    _, _, h, w = x.shape
    dcols = np.tensordot(grad_out, params.weights, axes=([1], [0]))  # (n, h_out, w_out, c_in, k, k)
    dxp = np.zeros((n, ci, h + 2 * p, w + 2 * p))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_input = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return np.ascontiguousarray(grad_input), grad_weights, grad_bias


# --- pooling ---

def maxpool2(x: Raster) -> tuple[Raster, np.ndarray]:
    """2x2 non-overlapping max pool.

    argmax holds, per output cell, the flat index (row * w + col) of the winning
    input pixel within its channel plane; ties go to the first element in
    row-major order.
    """
    x = as_raster(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    k = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + k // 2
    cols = 2 * np.arange(w // 2)[None, :] + k % 2
    return np.ascontiguousarray(out), rows * w + cols


def maxpool2_grad(argmax: np.ndarray, grad_out: Raster) -> Raster:
    grad_out = as_raster(grad_out)
    if argmax.shape != grad_out.shape:
        raise ValueError(f"argmax shape {argmax.shape} does not match grad_out {grad_out.shape}")
    n, c, ho, wo = grad_out.shape
    grad_in = np.zeros((n, c, 4 * ho * wo))
    np.put_along_axis(grad_in, argmax.reshape(n, c, -1), grad_out.reshape(n, c, -1), axis=2)
    return grad_in.reshape(n, c, 2 * ho, 2 * wo)


# --- nearest-neighbour upsampling (autoencoder decoder) ---

def upsample2(x: Raster) -> Raster:
    x = as_raster(x)
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def upsample2_grad(grad_out: Raster) -> Raster:
    grad_out = as_raster(grad_out)
    n, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ValueError(f"upsample2 gradient needs even spatial dims, got {h}x{w}")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# --- activation ---

def leaky_relu(x: Raster, slope: float) -> Raster:
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"leaky ReLU slope must lie in [0, 1], got {slope}")
    x = as_raster(x)
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x: Raster, slope: float, grad_out: Raster) -> Raster:
    # derivative at exactly 0 is the slope
    return np.where(as_raster(x) > 0, grad_out, slope * grad_out)


# --- batch normalization ---

@dataclass
class BatchNormCache:
    mode: str
    xhat: np.ndarray
    inv_std: np.ndarray


def batchnorm(x: Raster, params: LayerParams, mode: Mode) -> tuple[Raster, BatchNormCache]:
    """Per-channel standardization with learned scale (weights) and shift (bias).

    Train mode uses batch statistics and updates the running statistics in place.
    """
    x = as_raster(x)
    n, c = x.shape[:2]
    if c != params.weights.shape[0]:
        raise ValueError(f"batchnorm expects {params.weights.shape[0]} channels, got {c}")
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2 samples")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // c
        mom = params.momentum
        params.running_mean = (1 - mom) * params.running_mean + mom * mean
        params.running_var = (1 - mom) * params.running_var + mom * var * m / max(m - 1, 1)
    elif mode == "eval":
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.weights[None, :, None, None] * xhat + params.bias[None, :, None, None]
    return out, BatchNormCache(mode, xhat, inv_std)


def batchnorm_grad(cache: BatchNormCache, params: LayerParams, grad_out: Raster) -> tuple[Raster, np.ndarray, np.ndarray]:
    """Gradients wrt input, scale and shift."""
    grad_out = as_raster(grad_out)
    xhat = cache.xhat
    grad_scale = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * params.weights[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if cache.mode == "eval":
        return dxhat * inv_std, grad_scale, grad_shift
    m = grad_out.size // grad_out.shape[1]
    sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_input = inv_std / m * (m * dxhat - sum_d - xhat * sum_dx)
    return grad_input, grad_scale, grad_shift


# --- generic layer dispatch ---

def layer_forward(params: LayerParams, x: Raster, mode: Mode) -> tuple[Raster, object]:
    """Run one layer; returns the output and whatever its backward pass needs."""
    kind = params.kind
    if kind == "conv":
        return conv2d(x, params), x
    if kind == "batchnorm":
        return batchnorm(x, params, mode)
    if kind == "leakyrelu":
        return leaky_relu(x, params.slope), x
    if kind == "maxpool":
        out, argmax = maxpool2(x)
        return out, argmax
    if kind == "upsample":
        return upsample2(x), None
    raise ValueError(f"unknown layer kind {kind!r}")


def layer_backward(params: LayerParams, cache, grad_out: Raster) -> Raster:
    """Backward through one layer; parameter gradients are accumulated into the grad buffers."""
    kind = params.kind
    if kind == "conv":
        gx, gw, gb = conv2d_grad(cache, params, grad_out)
        params.grad_weights += gw
        params.grad_bias += gb
        return gx
    if kind == "batchnorm":
        gx, gs, gb = batchnorm_grad(cache, params, grad_out)
        params.grad_weights += gs
        params.grad_bias += gb
        return gx
    if kind == "leakyrelu":
        return leaky_relu_grad(cache, params.slope, grad_out)
    if kind == "maxpool":
        return maxpool2_grad(cache, grad_out)
    if kind == "upsample":
        return upsample2_grad(grad_out)
    raise ValueError(f"unknown layer kind {kind!r}")


# --- finite differences ---

def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_gradient(func: Callable[[], float], target: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of func() wrt every entry of target (perturbed in place, then restored)."""
    if not target.flags.c_contiguous:
        raise ValueError("gradient-check target must be C-contiguous so it can be perturbed in place")
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = func()
        flat[i] = orig - eps
        f_minus = func()
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite forward value at entry {i} during gradient check")
        gflat[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def grad_check(func: Callable[[], float], pairs: Sequence[tuple[np.ndarray, np.ndarray]],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    func evaluates the scalar under test from the current contents of the arrays;
    pairs lists (array, analytic gradient) for every input and parameter checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"finite-difference step must lie in [1e-7, 1e-3], got {eps}")
    if not np.isfinite(func()):
        raise ValueError("non-finite forward value")
    worst = 0.0
    for target, analytic in pairs:
        if analytic.shape != target.shape:
            raise ValueError(f"analytic gradient shape {analytic.shape} differs from {target.shape}")
        numeric = numeric_gradient(func, target, eps)
        if numeric.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
