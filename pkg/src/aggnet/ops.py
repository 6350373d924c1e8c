"""Layer primitives operating on (m, n, d) feature maps.

A feature map is a rank-3 numpy array: m rows, n columns, d channels,
row-major. All primitives are pure functions; convolutions are realised
as cached gather plans plus GEMMs (im2col) so that the cost lives in BLAS
rather than Python loops. Large maps are processed in row strips to keep
the transient patch matrix bounded.

Double precision is the default working dtype. Set AGGNET_FLOAT32=1 in the
environment to run forward/training computations in single precision
(checkpoints are always stored as float64).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError

DTYPE = np.float32 if os.environ.get("AGGNET_FLOAT32") == "1" else np.float64

# Upper bound on transient im2col patch-matrix elements per strip.
_STRIP_ELEMS = 1 << 25


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a square 2-D convolution.

    `padding` is either "same-half" (output spatial size = ceil(input / stride),
    zero padded) or "valid" (no padding). The effective kernel extent is
    (kernel_size - 1) * dilation + 1.
    """

    kernel_size: int
    in_depth: int
    out_depth: int
    stride: int = 1
    dilation: int = 1
    padding: str = "same-half"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation not in (1, 2, 4):
            raise ContractError(f"dilation must be 1, 2, or 4, got {self.dilation}")
        if self.in_depth < 1 or self.out_depth < 1:
            raise ContractError("in_depth and out_depth must be >= 1")
        if self.padding not in ("same-half", "valid"):
            raise ContractError(f"unknown padding mode {self.padding!r}")

    @property
    def extent(self) -> int:
        return (self.kernel_size - 1) * self.dilation + 1


class _ConvPlan:
    """Precomputed padding and gather indices for one (shape, spec) pair."""

    __slots__ = ("out_h", "out_w", "pad", "padded_h", "padded_w", "gather", "k2")

    def __init__(self, m, n, k, stride, dilation, padding):
        e = (k - 1) * dilation + 1
        if padding == "same-half":
            out_h = -(-m // stride)
            out_w = -(-n // stride)
            pad_m = max(0, (out_h - 1) * stride + e - m)
            pad_n = max(0, (out_w - 1) * stride + e - n)
        else:
            if m < e or n < e:
                raise ContractError(
                    f"valid convolution needs input >= {e}x{e}, got {m}x{n}")
            out_h = (m - e) // stride + 1
            out_w = (n - e) // stride + 1
            pad_m = pad_n = 0
        pt, pl = pad_m // 2, pad_n // 2
        self.out_h, self.out_w = out_h, out_w
        self.pad = ((pt, pad_m - pt), (pl, pad_n - pl))
        self.padded_h, self.padded_w = m + pad_m, n + pad_n
        self.k2 = k * k
        rows = np.arange(out_h)[:, None] * stride + np.arange(k)[None, :] * dilation
        cols = np.arange(out_w)[:, None] * stride + np.arange(k)[None, :] * dilation
        # flat indices into the padded (h, w) grid, shape (out_h*out_w, k*k)
        self.gather = (
            rows[:, None, :, None] * self.padded_w + cols[None, :, None, :]
        ).reshape(out_h * out_w, k * k)


@lru_cache(maxsize=256)
def _conv_plan(m, n, k, stride, dilation, padding) -> _ConvPlan:
    return _ConvPlan(m, n, k, stride, dilation, padding)


def _pad_input(x, plan):
    (pt, pb), (pl, pr) = plan.pad
    if pt or pb or pl or pr:
        x = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    return x.reshape(plan.padded_h * plan.padded_w, x.shape[-1])


def _strip_rows(n_rows, row_elems):
    """Yield (start, stop) output-row slices bounded by the strip budget."""
    rows_per = max(1, _STRIP_ELEMS // max(1, row_elems))
    for start in range(0, n_rows, rows_per):
        yield start, min(n_rows, start + rows_per)


def _conv_forward(x, w, b, spec: ConvSpec):
    """Core convolution forward; no validation (callers validate)."""
    m, n, c = x.shape
    k, o = spec.kernel_size, spec.out_depth
    plan = _conv_plan(m, n, k, spec.stride, spec.dilation, spec.padding)
    xf = _pad_input(x, plan)
    w2 = w.reshape(plan.k2 * c, o)
    out = np.empty((plan.out_h * plan.out_w, o), dtype=x.dtype)
    for lo, hi in _strip_rows(plan.out_h, plan.out_w * plan.k2 * c):
        sl = slice(lo * plan.out_w, hi * plan.out_w)
        patches = xf[plan.gather[sl]].reshape(-1, plan.k2 * c)
        np.matmul(patches, w2, out=out[sl])
    if b is not None:
        out += b
    return out.reshape(plan.out_h, plan.out_w, o)


def _conv_backward(x, w, spec: ConvSpec, dy, need_dx=True):
    """Gradients of _conv_forward. Patches are regathered rather than cached
    so memory stays bounded by one strip."""
    m, n, c = x.shape
    k, o = spec.kernel_size, spec.out_depth
    plan = _conv_plan(m, n, k, spec.stride, spec.dilation, spec.padding)
    xf = _pad_input(x, plan)
    w2 = w.reshape(plan.k2 * c, o)
    dy2 = dy.reshape(-1, o)
    dw = np.zeros((plan.k2 * c, o), dtype=x.dtype)
    db = dy2.sum(axis=0)
    dxf = np.zeros(plan.padded_h * plan.padded_w * c, dtype=x.dtype) if need_dx else None
    ch = np.arange(c)
    for lo, hi in _strip_rows(plan.out_h, plan.out_w * plan.k2 * c):
        sl = slice(lo * plan.out_w, hi * plan.out_w)
        idx = plan.gather[sl]
        patches = xf[idx].reshape(-1, plan.k2 * c)
        dw += patches.T @ dy2[sl]
        if need_dx:
            dpatch = dy2[sl] @ w2.T
            flat = (idx[:, :, None] * c + ch).ravel()
            dxf += np.bincount(flat, weights=dpatch.ravel(), minlength=dxf.size)
    dx = None
    if need_dx:
        (pt, _), (pl, _) = plan.pad
        dx = dxf.reshape(plan.padded_h, plan.padded_w, c)[pt:pt + m, pl:pl + n]
        dx = np.ascontiguousarray(dx, dtype=x.dtype)
    return dx, dw.reshape(w.shape), db


def _depthwise_forward(x, wd, bd):
    m, n, c = x.shape
    k = wd.shape[0]
    plan = _conv_plan(m, n, k, 1, 1, "same-half")
    xf = _pad_input(x, plan)
    patches = xf[plan.gather]                        # (P, k*k, c)
    out = np.einsum("ptc,tc->pc", patches, wd.reshape(plan.k2, c))
    if bd is not None:
        out += bd
    return out.reshape(plan.out_h, plan.out_w, c)


def _depthwise_backward(x, wd, dy, need_dx=True):
    m, n, c = x.shape
    k = wd.shape[0]
    plan = _conv_plan(m, n, k, 1, 1, "same-half")
    xf = _pad_input(x, plan)
    patches = xf[plan.gather]
    dy2 = dy.reshape(-1, c)
    dwd = np.einsum("ptc,pc->tc", patches, dy2).reshape(wd.shape)
    dbd = dy2.sum(axis=0)
    dx = None
    if need_dx:
        dpatch = dy2[:, None, :] * wd.reshape(1, plan.k2, c)
        flat = (plan.gather[:, :, None] * c + np.arange(c)).ravel()
        dxf = np.bincount(flat, weights=dpatch.ravel(),
                          minlength=plan.padded_h * plan.padded_w * c)
        (pt, _), (pl, _) = plan.pad
        dx = dxf.reshape(plan.padded_h, plan.padded_w, c)[pt:pt + m, pl:pl + n]
        dx = np.ascontiguousarray(dx, dtype=x.dtype)
    return dx, dwd, dbd


def _pointwise_forward(x, wp, bp):
    m, n, c = x.shape
    o = wp.shape[-1]
    out = x.reshape(-1, c) @ wp.reshape(c, o)
    if bp is not None:
        out += bp
    return out.reshape(m, n, o)


def _pointwise_backward(x, wp, dy, need_dx=True):
    m, n, c = x.shape
    o = wp.shape[-1]
    dy2 = dy.reshape(-1, o)
    x2 = x.reshape(-1, c)
    dwp = (x2.T @ dy2).reshape(wp.shape)
    dbp = dy2.sum(axis=0)
    dx = (dy2 @ wp.reshape(c, o).T).reshape(m, n, c) if need_dx else None
    return dx, dwp, dbp


def _maxpool_forward(x):
    m, n, c = x.shape
    mo, no = -(-m // 2), -(-n // 2)
    if (2 * mo - m) or (2 * no - n):
        x = np.pad(x, ((0, 2 * mo - m), (0, 2 * no - n), (0, 0)),
                   constant_values=-np.inf)
    win = x.reshape(mo, 2, no, 2, c).transpose(0, 2, 1, 3, 4).reshape(mo, no, 4, c)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, arg


def _maxpool_backward(x_shape, arg, dy):
    m, n, c = x_shape
    mo, no = -(-m // 2), -(-n // 2)
    dwin = np.zeros((mo, no, 4, c), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[:, :, None, :], dy[:, :, None, :], axis=2)
    dx = dwin.reshape(mo, no, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * mo, 2 * no, c)
    return np.ascontiguousarray(dx[:m, :n])


def validate_feature_map(x, name="input"):
    """Check the (m, n, d) contract: rank 3, all dims >= 1, finite values."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ContractError(f"{name} must be rank-3 (m, n, d), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ContractError(f"{name} dimensions must be >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains non-finite values")
    return x


def conv2d(input, kernels, bias, spec: ConvSpec):
    """2-D convolution with stride, dilation and zero padding.

    Each output value is bias plus the sum over the dilated k x k
    neighbourhood of input times kernel. `kernels` has shape
    (k, k, in_depth, out_depth), `bias` shape (out_depth,) or None.
    """
    x = validate_feature_map(input)
    kernels = np.asarray(kernels)
    expect = (spec.kernel_size, spec.kernel_size, spec.in_depth, spec.out_depth)
    if kernels.shape != expect:
        raise ContractError(f"kernel shape {kernels.shape} does not match spec {expect}")
    if x.shape[2] != spec.in_depth:
        raise ContractError(f"input depth {x.shape[2]} != spec.in_depth {spec.in_depth}")
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (spec.out_depth,):
            raise ContractError(f"bias shape {bias.shape} != ({spec.out_depth},)")
    return _conv_forward(x, kernels, bias, spec)


def depthwise_separable_conv2d(input, depth_kernels, point_kernels,
                               depth_bias=None, point_bias=None):
    """Per-channel spatial convolution followed by a 1x1 cross-channel mix.

    Stride 1, same-half padding. `depth_kernels` has shape (k, k, in_depth),
    `point_kernels` (1, 1, in_depth, out_depth).
    """
    x = validate_feature_map(input)
    wd = np.asarray(depth_kernels)
    wp = np.asarray(point_kernels)
    if wd.ndim != 3 or wd.shape[0] != wd.shape[1] or wd.shape[0] % 2 == 0:
        raise ContractError(f"depth kernels must be (k, k, c) with odd k, got {wd.shape}")
    if wd.shape[2] != x.shape[2]:
        raise ContractError(f"depth kernel channels {wd.shape[2]} != input depth {x.shape[2]}")
    if wp.ndim != 4 or wp.shape[0] != 1 or wp.shape[1] != 1 or wp.shape[2] != x.shape[2]:
        raise ContractError(f"point kernels must be (1, 1, {x.shape[2]}, out), got {wp.shape}")
    h = _depthwise_forward(x, wd, depth_bias)
    return _pointwise_forward(h, wp, point_bias)


def max_pool2d(input):
    """2x2 max pooling with stride 2; odd borders use truncated windows."""
    x = validate_feature_map(input)
    out, _ = _maxpool_forward(x)
    return out


def global_avg_pool(input):
    """Mean over all spatial positions, per channel; returns a length-d vector."""
    x = validate_feature_map(input)
    return x.mean(axis=(0, 1))


def relu(input):
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(input), 0)


def softmax(scores):
    """Normalise raw scores to a probability vector, exp(s_i) / sum exp(s_j).

    Implemented with a max shift so arbitrarily large scores do not overflow.
    """
    s = np.asarray(scores, dtype=np.result_type(scores, np.float64))
    if s.ndim != 1 or s.size < 2:
        raise ContractError(f"softmax expects a vector of length >= 2, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ContractError("softmax input contains non-finite values")
    e = np.exp(s - s.max())
    return e / e.sum()


def log_softmax_nll(scores, true_index):
    """Negative log softmax probability of `true_index`, fused for stability."""
    s = np.asarray(scores, dtype=np.result_type(scores, np.float64))
    if not 0 <= true_index < s.size:
        raise ContractError(f"class index {true_index} out of range for {s.size} scores")
    mx = s.max()
    return math.log(np.exp(s - mx).sum()) + mx - s[true_index]
