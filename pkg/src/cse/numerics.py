"""Small deterministic tensor kernels with hand-written backward passes.

Arrays are plain numpy ndarrays in NCHW layout. Every kernel keeps the dtype of
its input, so a float32 pipeline can be re-evaluated in float64 by the
finite-difference oracle without a second code path.

Random streams come from numpy's ``PCG64`` bit generator. A stream is fully
determined by its seed sequence, and :func:`derive_rng` builds independent
child streams from ``(seed, *keys)`` so that per-item work can run in any order
or on any thread and still draw the same numbers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import RejectedInputError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Child stream keyed by ``(seed, *keys)``; independent of call order."""
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass
class ConvParams:
    """Pointwise (1x1) convolution; ``weight`` is ``C_out x C_in x 1 x 1``."""

    weight: np.ndarray
    bias: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (1, 1):
            raise RejectedInputError(
                f"pointwise weight must be C_out x C_in x 1 x 1, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise RejectedInputError(
                f"bias shape {self.bias.shape} does not match C_out={self.weight.shape[0]}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    trainable: bool = True

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise RejectedInputError("batch-norm parameter shapes disagree")
        if np.any(self.running_var <= 0):
            raise RejectedInputError("running_var must be strictly positive")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(gamma=np.ones(channels, dtype), beta=np.zeros(channels, dtype),
                   running_mean=np.zeros(channels, dtype), running_var=np.ones(channels, dtype))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


LayerParams = ConvParams | BatchNormParams


def _check_nchw(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise RejectedInputError(f"{name} must be N x C x H x W, got shape {x.shape}")


# --- pointwise convolution ----------------------------------------------------

def pointwise_conv(x: np.ndarray, params: ConvParams) -> np.ndarray:
    _check_nchw(x)
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise RejectedInputError(f"input has {c} channels, weight expects {params.in_channels}")
    w2 = params.weight[:, :, 0, 0].astype(x.dtype, copy=False)
    out = np.matmul(w2, x.reshape(n, c, h * w))
    out += params.bias.astype(x.dtype, copy=False)[None, :, None]
    return out.reshape(n, params.out_channels, h, w)


def pointwise_conv_backward(grad_out: np.ndarray, x: np.ndarray, params: ConvParams):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    _check_nchw(x)
    _check_nchw(grad_out, "grad_out")
    n, c, h, w = x.shape
    if c != params.in_channels or grad_out.shape != (n, params.out_channels, h, w):
        raise RejectedInputError(
            f"grad_out {grad_out.shape} inconsistent with input {x.shape} and weight "
            f"{params.weight.shape}")
    g = grad_out.reshape(n, params.out_channels, h * w)
    xf = x.reshape(n, c, h * w)
    w2 = params.weight[:, :, 0, 0].astype(x.dtype, copy=False)
    grad_input = np.matmul(w2.T, g).reshape(x.shape)
    grad_weight = np.tensordot(g, xf, axes=([0, 2], [0, 2]))[:, :, None, None]
    grad_bias = g.sum(axis=(0, 2))
    return grad_input, grad_weight, grad_bias


# --- batch normalization ------------------------------------------------------

def _batch_stats(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def batch_norm(x: np.ndarray, params: BatchNormParams, mode: str = "eval") -> np.ndarray:
    """Per-channel normalization ``gamma * (x - mu) / sqrt(var + eps) + beta``.

    In ``"train"`` mode the batch statistics are used and the running
    statistics are updated in place (unbiased variance, torch convention). In
    ``"eval"`` mode the running statistics are used and nothing is mutated.
    """
    _check_nchw(x)
    if x.shape[1] != params.channels:
        raise RejectedInputError(f"input has {x.shape[1]} channels, batch-norm has {params.channels}")
    dt = x.dtype
    if mode == "train":
        mean, var = _batch_stats(x)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = params.momentum
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased
    elif mode == "eval":
        mean = params.running_mean.astype(dt, copy=False)
        var = params.running_var.astype(dt, copy=False)
    else:
        raise RejectedInputError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + dt.type(params.eps))
    scale = (params.gamma.astype(dt, copy=False) * inv_std)[None, :, None, None]
    return (x - mean[None, :, None, None]) * scale + params.beta.astype(dt, copy=False)[None, :, None, None]


def batch_norm_backward(grad_out: np.ndarray, x: np.ndarray, params: BatchNormParams,
                        mode: str = "train"):
    """Return ``(grad_input, grad_gamma, grad_beta)``; stats are recomputed from ``x``."""
    _check_nchw(x)
    dt = x.dtype
    gamma = params.gamma.astype(dt, copy=False)
    if mode == "train":
        mean, var = _batch_stats(x)
    else:
        mean = params.running_mean.astype(dt, copy=False)
        var = params.running_var.astype(dt, copy=False)
    inv_std = 1.0 / np.sqrt(var + dt.type(params.eps))
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    if mode != "train":
        return grad_out * (gamma * inv_std)[None, :, None, None], grad_gamma, grad_beta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    dxhat = grad_out * gamma[None, :, None, None]
    grad_input = (inv_std / m)[None, :, None, None] * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return grad_input, grad_gamma, grad_beta


# --- activations and pooling --------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def avg_pool2d(x: np.ndarray, kernel: int = 2, stride: int = 2) -> np.ndarray:
    """Non-overlapping window mean. Only ``kernel == stride`` is supported."""
    _check_nchw(x)
    if kernel != stride:
        raise RejectedInputError("avg_pool2d supports non-overlapping windows only (kernel == stride)")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise RejectedInputError(f"spatial dims {h}x{w} not divisible by stride {stride}")
    # row-major window sum, so results match a plain nested-loop mean exactly
    acc = None
    for di in range(stride):
        for dj in range(stride):
            part = x[:, :, di::stride, dj::stride]
            acc = part.copy() if acc is None else acc + part
    return acc / x.dtype.type(kernel * kernel)


def avg_pool2d_backward(grad_out: np.ndarray, kernel: int = 2, stride: int = 2) -> np.ndarray:
    if kernel != stride:
        raise RejectedInputError("avg_pool2d supports non-overlapping windows only (kernel == stride)")
    g = grad_out / grad_out.dtype.type(kernel * kernel)
    return np.repeat(np.repeat(g, stride, axis=2), stride, axis=3)


# --- resizing -----------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int, mode: str = "bilinear", dtype=np.float64) -> np.ndarray:
    """``n_out x n_in`` matrix ``A`` so that resizing one axis is ``A @ x``.

    Bilinear uses half-pixel centers (align-corners off) with sources clamped at
    the border; nearest picks ``floor(i * n_in / n_out)``.
    """
    if n_in < 1 or n_out < 1:
        raise RejectedInputError("resize dims must be >= 1")
    a = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum((rows * n_in) // n_out, n_in - 1)
        a[rows, src] = 1.0
    elif mode == "bilinear":
        src = (rows + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, None)
        i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = src - i0
        np.add.at(a, (rows, i0), 1.0 - lam)
        np.add.at(a, (rows, i1), lam)
    else:
        raise RejectedInputError(f"unknown resize mode {mode!r}")
    return a.astype(dtype)


def resize(x: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize the last two axes of ``x``."""
    if out_h < 1 or out_w < 1:
        raise RejectedInputError("resize dims must be >= 1")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ah = interp_matrix(h, out_h, mode, x.dtype)
    aw = interp_matrix(w, out_w, mode, x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


def resize_backward(grad_out: np.ndarray, in_h: int, in_w: int, mode: str = "bilinear") -> np.ndarray:
    out_h, out_w = grad_out.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    ah = interp_matrix(in_h, out_h, mode, grad_out.dtype)
    aw = interp_matrix(in_w, out_w, mode, grad_out.dtype)
    return np.matmul(np.matmul(ah.T, grad_out), aw)


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return resize(x, out_h, out_w, "bilinear")


def resize_nearest(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return resize(x, out_h, out_w, "nearest")


# --- gaussian blur ------------------------------------------------------------

def gaussian_kernel(kernel_size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise RejectedInputError(f"kernel_size must be odd and >= 3, got {kernel_size}")
    if sigma <= 0:
        raise RejectedInputError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).astype(dtype)


def gaussian_blur(img: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with reflect padding."""
    k = gaussian_kernel(kernel_size, sigma, np.float64)
    r = kernel_size // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img.astype(np.float64, copy=False), pad, mode="reflect")
    p = np.lib.stride_tricks.sliding_window_view(p, kernel_size, axis=-1) @ k
    p = np.lib.stride_tricks.sliding_window_view(p, kernel_size, axis=-2) @ k
    return p.astype(img.dtype, copy=False)


# --- finite-difference oracle -------------------------------------------------

def grad_check(forward_fn: Callable, params: Mapping[str, np.ndarray], input,
               epsilon: float = 1e-6, floor_ratio: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``forward_fn(params, input)`` must return ``(loss, grads)`` where ``grads``
    maps every key of ``params`` to an array of the same shape. Parameters and
    array inputs are promoted to float64 copies before evaluation; only the
    entries of ``params`` are perturbed, so the caller controls the check set.

    Per element the error is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = floor_ratio * max|a|`` over the whole check set, which keeps
    exactly-zero gradients from dividing finite-difference round-off by zero.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if isinstance(input, np.ndarray):
        input = input.astype(np.float64)
    _, analytic = forward_fn(p64, input)
    analytic = {k: np.asarray(analytic[k], dtype=np.float64) for k in p64}
    numeric = {}
    for name, arr in p64.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = forward_fn(p64, input)
            flat[i] = orig - epsilon
            lm, _ = forward_fn(p64, input)
            flat[i] = orig
            nflat[i] = (float(lp) - float(lm)) / (2 * epsilon)
        numeric[name] = num
    scale = max((float(np.abs(a).max()) for a in analytic.values() if a.size), default=0.0)
    floor = max(floor_ratio * scale, 1e-300)
    worst = 0.0
    for name in p64:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return worst
