"""Dense tensor kernels: convolution, ReLU, batch norm, resizing, extrema.

The public ``Tensor4`` layout is (batch, channel, height, width), row-major.
The network keeps its activations channels-last, (batch, height, width,
channel), because a convolution then becomes one tall matrix product; the
``*_nhwc`` functions are the kernels and the unsuffixed functions are the
same kernels behind a layout change. Weights always use the public
(out_channels, in_channels, kernel_h, kernel_w) layout.

Every function is pure. Float32 is the working precision; the same code runs
in float64 for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding_mode: str = "same-ceil"

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.padding_mode != "same-ceil":
            raise ConfigError(f"unsupported padding mode {self.padding_mode!r}")

    @property
    def pointwise(self) -> bool:
        return self.kernel_h == 1 and self.kernel_w == 1 and self.stride == 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return math.ceil(h / self.stride), math.ceil(w / self.stride)

    def padding(self, h: int, w: int) -> tuple[int, int]:
        """Top and left zero padding; any odd remainder goes bottom/right."""
        oh, ow = self.output_size(h, w)
        pad_h = max((oh - 1) * self.stride + self.kernel_h - h, 0)
        pad_w = max((ow - 1) * self.stride + self.kernel_w - w, 0)
        return pad_h // 2, pad_w // 2


def to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _weight_matrix(weights):
    o, c, kh, kw = weights.shape
    return np.ascontiguousarray(weights.transpose(2, 3, 1, 0)).reshape(kh * kw * c, o)


def _check_conv(channels, dims, weights, spec):
    expected = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expected:
        raise ConfigError(f"conv weights have dims {weights.shape}, expected {expected}")
    if channels != spec.in_channels:
        raise ConfigError(
            f"conv input has {channels} channels, spec expects {spec.in_channels} (input dims {dims})"
        )


# ---------------------------------------------------------------------------
# convolution

def conv2d_forward_nhwc(x, weights, bias, spec: ConvSpec, return_cols: bool = False):
    if x.ndim != 4:
        raise ConfigError(f"conv input must be 4-D, got dims {x.shape}")
    n, h, w, c = x.shape
    _check_conv(c, x.shape, weights, spec)
    bias = np.asarray(bias)
    if bias.shape != (spec.out_channels,):
        raise ConfigError(f"conv bias has dims {bias.shape}, expected ({spec.out_channels},)")
    oh, ow = spec.output_size(h, w)
    x = np.ascontiguousarray(x)
    if spec.pointwise:
        cols = x.reshape(n * h * w, c)
    else:
        pad_top, pad_left = spec.padding(h, w)
        cols = kernels.im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, pad_top, pad_left, oh, ow)
    out = cols @ _weight_matrix(weights).astype(cols.dtype, copy=False)
    out += bias.astype(out.dtype, copy=False)
    out = out.reshape(n, oh, ow, spec.out_channels)
    return (out, cols) if return_cols else out


def conv2d_backward_nhwc(x, weights, spec: ConvSpec, grad_out, cols=None, need_input_grad=True):
    n, h, w, c = x.shape
    _check_conv(c, x.shape, weights, spec)
    oh, ow = spec.output_size(h, w)
    if grad_out.shape != (n, oh, ow, spec.out_channels):
        raise ConfigError(
            f"grad_out has dims {grad_out.shape}, expected {(n, oh, ow, spec.out_channels)}"
        )
    pad_top, pad_left = spec.padding(h, w)
    if cols is None:
        x = np.ascontiguousarray(x)
        if spec.pointwise:
            cols = x.reshape(n * h * w, c)
        else:
            cols = kernels.im2col(x, spec.kernel_h, spec.kernel_w, spec.stride,
                                  pad_top, pad_left, oh, ow)
    g = np.ascontiguousarray(grad_out).reshape(-1, spec.out_channels)
    gw = cols.T @ g
    grad_w = np.ascontiguousarray(
        gw.reshape(spec.kernel_h, spec.kernel_w, c, spec.out_channels).transpose(3, 2, 0, 1))
    grad_b = _column_sums(g)
    if not need_input_grad:
        return None, grad_w, grad_b
    dcols = g @ _weight_matrix(weights).astype(g.dtype, copy=False).T
    if spec.pointwise:
        grad_x = dcols.reshape(n, h, w, c)
    else:
        grad_x = kernels.col2im(dcols, n, h, w, c, spec.kernel_h, spec.kernel_w, spec.stride,
                                pad_top, pad_left, oh, ow)
    return grad_x, grad_w, grad_b


def conv2d_forward(x, weights, bias, spec: ConvSpec):
    """Strided 2-D cross-correlation of an (n, c, h, w) tensor.

    Same-ceil zero padding: the output is ``ceil(h / stride) x ceil(w / stride)``
    and each site is the dot product of its zero-padded receptive field with
    the kernel, plus bias.
    """
    if x.ndim != 4:
        raise ConfigError(f"conv input must be 4-D, got dims {x.shape}")
    _check_conv(x.shape[1], x.shape, weights, spec)
    return to_nchw(conv2d_forward_nhwc(to_nhwc(x), weights, bias, spec))


def conv2d_backward(x, weights, spec: ConvSpec, grad_out):
    """Returns ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    if x.ndim != 4 or grad_out.ndim != 4:
        raise ConfigError(f"conv tensors must be 4-D, got {x.shape} and {grad_out.shape}")
    _check_conv(x.shape[1], x.shape, weights, spec)
    oh, ow = spec.output_size(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], spec.out_channels, oh, ow):
        raise ConfigError(
            f"grad_out has dims {grad_out.shape}, expected {(x.shape[0], spec.out_channels, oh, ow)}"
        )
    gx, gw, gb = conv2d_backward_nhwc(to_nhwc(x), weights, spec, to_nhwc(grad_out))
    return to_nchw(gx), gw, gb


# ---------------------------------------------------------------------------
# elementwise and normalization

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Pass ``grad_out`` where the forward input was strictly positive."""
    return grad_out * (x > 0)


def _column_sums(x2):
    # BLAS gemv; numpy's axis-0 reduction is several times slower here
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def batchnorm_forward_nhwc(x, scale, shift, mode, running_mean, running_var,
                           momentum_bn=0.1, epsilon=1e-5):
    c = x.shape[-1]
    if np.shape(scale) != (c,) or np.shape(shift) != (c,):
        raise ConfigError(
            f"batchnorm input dims {x.shape} do not match scale {np.shape(scale)} / shift {np.shape(shift)}"
        )
    if epsilon <= 0:
        raise ConfigError("batchnorm epsilon must be positive")
    dt = x.dtype
    x2 = x.reshape(-1, c)
    if mode == "train":
        m = x2.shape[0]
        mean = _column_sums(x2) / dt.type(m)
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / dt.type(m)
        unbiased = var * (m / max(m - 1, 1))
        new_mean = ((1 - momentum_bn) * running_mean + momentum_bn * mean).astype(running_mean.dtype)
        new_var = ((1 - momentum_bn) * running_var + momentum_bn * unbiased).astype(running_var.dtype)
    elif mode == "eval":
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
        xhat = x2 - mean
        new_mean, new_var = running_mean, running_var
    else:
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + dt.type(epsilon))).astype(dt)
    xhat *= inv_std
    y = xhat * scale.astype(dt, copy=False)
    y += shift.astype(dt, copy=False)
    cache = (xhat, inv_std, scale, mode)
    return y.reshape(x.shape), cache, new_mean, new_var


def batchnorm_backward_nhwc(grad_out, cache):
    xhat, inv_std, scale, mode = cache
    c = grad_out.shape[-1]
    g2 = grad_out.reshape(-1, c)
    grad_shift = _column_sums(g2)
    grad_scale = np.einsum("ij,ij->j", g2, xhat)
    k = scale.astype(g2.dtype, copy=False) * inv_std
    if mode == "eval":
        return (g2 * k).reshape(grad_out.shape), grad_scale, grad_shift
    m = g2.shape[0]
    # dx = scale * inv_std * (g - mean(g) - xhat * mean(g * xhat))
    dx = xhat * (grad_scale / g2.dtype.type(m))
    np.subtract(g2, dx, out=dx)
    dx -= grad_shift / g2.dtype.type(m)
    dx *= k
    return dx.reshape(grad_out.shape), grad_scale, grad_shift


def batchnorm(x, scale, shift, mode, running_mean, running_var, momentum_bn=0.1, epsilon=1e-5):
    """Per-channel batch normalization of an (n, c, h, w) tensor.

    ``"train"`` standardizes with batch statistics and returns the running
    statistics updated as ``(1-m)*running + m*batch`` (unbiased variance);
    ``"eval"`` standardizes with the running statistics. Returns
    ``(y, cache, new_running_mean, new_running_var)``; pass ``cache`` to
    :func:`batchnorm_backward`.
    """
    if x.ndim != 4:
        raise ConfigError(f"batchnorm input must be 4-D, got dims {x.shape}")
    if np.shape(scale) != (x.shape[1],):
        raise ConfigError(f"batchnorm has {x.shape[1]} channels but scale has dims {np.shape(scale)}")
    y, cache, rm, rv = batchnorm_forward_nhwc(to_nhwc(x), scale, shift, mode, running_mean,
                                              running_var, momentum_bn, epsilon)
    return to_nchw(y), cache, rm, rv


def batchnorm_backward(grad_out, cache):
    """Returns ``(grad_input, grad_scale, grad_shift)`` in (n, c, h, w) layout."""
    dx, gs, gb = batchnorm_backward_nhwc(to_nhwc(grad_out), cache)
    return to_nchw(dx), gs, gb


# ---------------------------------------------------------------------------
# resizing and extrema

def _axis_weights(src: int, dst: int, dtype):
    if dst == 1 or src == 1:
        pos = np.zeros(dst, dtype=np.float64)
    else:
        pos = np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, (pos - lo).astype(dtype)


def bilinear_resize(x, target_h: int, target_w: int):
    """Align-corners bilinear resize over the last two axes.

    Corner samples land on corner samples, so resizing to the input size is
    the identity and outputs stay within each plane's [min, max].
    """
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"bilinear_resize target must be at least 1x1, got {target_h}x{target_w}")
    x = np.asarray(x)
    if x.ndim < 2 or 0 in x.shape[-2:]:
        raise ConfigError(f"bilinear_resize needs non-empty maps, got dims {x.shape}")
    h, w = x.shape[-2:]
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.dtype(np.float64)
    x = x.astype(dt, copy=False)
    if (h, w) == (target_h, target_w):
        return x.copy()
    r0, r1, fr = _axis_weights(h, target_h, dt)
    c0, c1, fc = _axis_weights(w, target_w, dt)
    top = x[..., r0, :]
    rows = top + (x[..., r1, :] - top) * fr[:, None]
    left = rows[..., c0]
    out = left + (rows[..., c1] - left) * fc
    # a + (b - a) * t can round a hair outside [a, b]
    lo = x.min(axis=(-2, -1))[..., None, None]
    hi = x.max(axis=(-2, -1))[..., None, None]
    return np.clip(out, lo, hi)


def spatial_extrema(m):
    """Global ``(max, (row, col), min, (row, col))`` of a 2-D map.

    Ties resolve to the first occurrence in row-major order.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.size == 0:
        raise ConfigError(f"spatial_extrema needs a non-empty 2-D map, got dims {m.shape}")
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(np.float64)
    vmax, imax, vmin, imin = kernels.row_extrema(np.ascontiguousarray(m).reshape(1, -1))
    w = m.shape[1]
    return vmax[0].item(), divmod(int(imax[0]), w), vmin[0].item(), divmod(int(imin[0]), w)


def batch_extrema(maps):
    """Extrema of each (n, c) plane of an (n, c, h, w) tensor.

    Returns ``(max, argmax, min, argmin)``, each of shape (n, c); positions
    are flat row-major indices into the plane.
    """
    n, c, h, w = maps.shape
    if h * w == 0:
        raise ConfigError(f"cannot take extrema of empty maps with dims {maps.shape}")
    rows = np.ascontiguousarray(maps).reshape(n * c, h * w)
    vmax, imax, vmin, imin = kernels.row_extrema(rows)
    return vmax.reshape(n, c), imax.reshape(n, c), vmin.reshape(n, c), imin.reshape(n, c)
