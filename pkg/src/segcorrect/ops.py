"""Differentiable array operations used by the refinement networks.

Everything operates on plain numpy arrays in (batch, channels, height, width)
layout. Each forward op has a matching analytic backward; none of them keep
hidden state, so a caller assembles a graph by holding on to whatever the
backward needs (typically the op's input or output).

Storage dtype is float32; all ops also run in float64, which is what the
finite-difference gradient checks use.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "sigmoid")


def require_finite(x, what="input"):
    """Raise NumericError if x contains NaN or +-Inf.

    Uses min+max instead of isfinite to avoid allocating a bool array the
    size of x on the training hot path.
    """
    if x.size and not np.isfinite(x.min() + x.max()):
        raise NumericError(f"non-finite values in {what}")


@dataclass
class ConvWeights:
    """3x3 convolution parameters: kernel (out_ch, in_ch, 3, 3), bias (out_ch,)."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise ShapeError(f"kernel must be (out,in,3,3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.kernel.shape[0]} output channels"
            )

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]


def _pad_nhwc(x):
    """NCHW input -> zero-padded channels-last array (n, h+2, w+2, c).

    Channels-last keeps the unit stride on the channel axis, which is what
    makes both conv strategies below stream instead of gather.
    """
    n, c, h, w = x.shape
    xpad = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xpad[:, 1 : 1 + h, 1 : 1 + w, :] = x.transpose(0, 2, 3, 1)
    return xpad


def _conv_core_nhwc(xpad, kernel):
    """3x3 valid correlation of a padded channels-last array.

    kernel: (c_out, c_in, 3, 3). Returns (n, h, w, c_out). Two strategies
    with identical results:

    - channel-expanding layers unfold 3x3 patches and use one big matmul;
    - the rest run one matmul per kernel tap over the full padded array and
      accumulate shifted views, which avoids the patch copy entirely (the
      few extra border rows cost far less than unfolding on this side of
      the memory-bandwidth budget).
    """
    n, hp, wp, c = xpad.shape
    h, w = hp - 2, wp - 2
    co = kernel.shape[0]
    kern = kernel.astype(xpad.dtype, copy=False)
    if co > c:
        sn, sh, sw, sc = xpad.strides
        win = as_strided(xpad, (n, h, w, 3, 3, c), (sn, sh, sw, sh, sw, sc))
        mat = kern.transpose(2, 3, 1, 0).reshape(9 * c, co)
        return (win.reshape(n * h * w, 9 * c) @ np.ascontiguousarray(mat)).reshape(
            n, h, w, co
        )
    # one wide matmul for all nine taps, then accumulate shifted views
    mat = np.ascontiguousarray(kern.transpose(1, 2, 3, 0).reshape(c, 9 * co))
    taps = (xpad.reshape(n * hp * wp, c) @ mat).reshape(n, hp, wp, 9, co)
    out = np.zeros((n, h, w, co), dtype=xpad.dtype)
    for i in range(3):
        for j in range(3):
            out += taps[:, i : i + h, j : j + w, 3 * i + j, :]
    return out


def conv2d(x, weights):
    """Same-padded 3x3 cross-correlation with stride 1.

    x: (n, c_in, h, w); returns (n, c_out, h, w).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != weights.in_channels:
        raise ShapeError(
            f"input has {c} channels, kernel expects {weights.in_channels}"
        )
    require_finite(x, "conv2d input")
    y = _conv_core_nhwc(_pad_nhwc(x), weights.kernel)
    y += weights.bias.astype(x.dtype, copy=False)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv_grad_input_nhwc(gy_nhwc, kernel):
    """grad wrt input as one matmul plus shifted scatter-adds (col2im).

    gy_nhwc: (n, h, w, c_out) contiguous. Returns (n, h, w, c_in). Scatter
    beats re-running the forward machinery on the flipped kernel here:
    strided += streams where the patch gather would stall.
    """
    n, h, w, co = gy_nhwc.shape
    c = kernel.shape[1]
    mat = np.ascontiguousarray(
        kernel.astype(gy_nhwc.dtype, copy=False).transpose(0, 2, 3, 1).reshape(co, 9 * c)
    )
    gcols = (gy_nhwc.reshape(n * h * w, co) @ mat).reshape(n, h, w, 3, 3, c)
    gxpad = np.zeros((n, h + 2, w + 2, c), dtype=gy_nhwc.dtype)
    for i in range(3):
        for j in range(3):
            gxpad[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
    return gxpad[:, 1 : 1 + h, 1 : 1 + w, :]


def conv2d_backward(gy, x, weights):
    """Gradients of conv2d: returns (grad_input, grad_kernel, grad_bias).

    grad_input contracts the output gradient with the kernel and scatters
    the taps back (col2im); grad_kernel contracts the padded input against
    the output gradient one tap at a time, copying whichever side has
    fewer channels.
    """
    n, c, h, w = x.shape
    co = weights.out_channels
    gb = gy.sum(axis=(0, 2, 3))
    kern = weights.kernel.astype(gy.dtype, copy=False)

    gy_nhwc = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))
    if co > c:
        gx_nhwc = _conv_grad_input_nhwc(gy_nhwc, kern)
    else:
        gyp = np.zeros((n, h + 2, w + 2, co), dtype=gy.dtype)
        gyp[:, 1 : 1 + h, 1 : 1 + w, :] = gy_nhwc
        flipped = kern.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        gx_nhwc = _conv_core_nhwc(gyp, flipped)
    gx = np.ascontiguousarray(gx_nhwc.transpose(0, 3, 1, 2))

    gw = np.empty_like(weights.kernel, dtype=gy.dtype)
    gyflat = gy_nhwc.reshape(n * h * w, co)
    if c <= 2 * co:
        xpad = _pad_nhwc(x)
        for i in range(3):
            for j in range(3):
                patch = np.ascontiguousarray(xpad[:, i : i + h, j : j + w, :])
                gw[:, :, i, j] = gyflat.T @ patch.reshape(n * h * w, c)
    else:
        # strong compression: copy the (small) gy side instead
        gyp = np.zeros((n, h + 2, w + 2, co), dtype=gy.dtype)
        gyp[:, 1 : 1 + h, 1 : 1 + w, :] = gy_nhwc
        xflat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
        for i in range(3):
            for j in range(3):
                # gw_ij = sum_p gy[p] x[p + (i-1, j-1)], with gy zero outside
                patch = np.ascontiguousarray(gyp[:, 2 - i : 2 - i + h, 2 - j : 2 - j + w, :])
                gw[:, :, i, j] = patch.reshape(n * h * w, co).T @ xflat
    return gx, gw, gb


def maxpool2x2(x):
    """2x2 max pooling with stride 2.

    Odd heights/widths are padded on the bottom/right with -inf first.
    Returns (pooled, cache); the cache stores the argmax position of each
    block (first occurrence in row-major order on ties) for the backward.
    """
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("maxpool2x2 on empty spatial dims")
    hp, wp = h + (h & 1), w + (w & 1)
    if (hp, wp) != (h, w):
        xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
        xp[:, :, :h, :w] = x
    else:
        xp = x
    blocks = (
        xp.reshape(n, c, hp // 2, 2, wp // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hp // 2, wp // 2, 4)
    )
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, (h, w))


def maxpool2x2_backward(gy, cache):
    """Route each incoming gradient to its block's stored argmax position."""
    idx, (h, w) = cache
    n, c, h2, w2 = gy.shape
    g = np.zeros((n, c, h2, w2, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return np.ascontiguousarray(g[:, :, :h, :w])


@lru_cache(maxsize=64)
def _upsample_matrix(size, dtype_name):
    """Row-stochastic (2*size, size) interpolation matrix for 2x upsampling.

    Output pixel d samples source coordinate (d + 0.5)/2 - 0.5, clamped to
    the valid range. Rows sum to 1, so constants are preserved exactly.
    """
    s = np.clip((np.arange(2 * size) + 0.5) / 2.0 - 0.5, 0.0, size - 1.0)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    f = s - i0
    m = np.zeros((2 * size, size), dtype=np.dtype(dtype_name))
    rows = np.arange(2 * size)
    np.add.at(m, (rows, i0), (1.0 - f).astype(m.dtype))
    np.add.at(m, (rows, i1), f.astype(m.dtype))
    return m


def upsample_bilinear_2x(x):
    """Bilinear 2x upsampling: (n, c, h, w) -> (n, c, 2h, 2w)."""
    n, c, h, w = x.shape
    my = _upsample_matrix(h, x.dtype.name)
    mx = _upsample_matrix(w, x.dtype.name)
    y = np.matmul(my, x.reshape(n * c, h, w))
    y = np.matmul(y, mx.T)
    return y.reshape(n, c, 2 * h, 2 * w)


def upsample_bilinear_2x_backward(gy, in_hw):
    """Transpose of the interpolation: scatter output grads back to sources."""
    h, w = in_hw
    n, c = gy.shape[:2]
    my = _upsample_matrix(h, gy.dtype.name)
    mx = _upsample_matrix(w, gy.dtype.name)
    g = np.matmul(my.T, gy.reshape(n * c, 2 * h, 2 * w))
    g = np.matmul(g, mx)
    return g.reshape(n, c, h, w)


def activation(x, mode):
    """Elementwise nonlinearity: relu, tanh, or sigmoid."""
    if mode == "relu":
        return np.maximum(x, 0)
    if mode == "tanh":
        return np.tanh(x)
    if mode == "sigmoid":
        # sign-split form is stable for large |x|
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    raise ConfigError(f"unknown activation mode {mode!r}")


def activation_backward(gy, y, mode):
    """Derivative through the nonlinearity, expressed via the stored output y."""
    if mode == "relu":
        return gy * (y > 0)
    if mode == "tanh":
        return gy * (1.0 - y * y)
    if mode == "sigmoid":
        return gy * y * (1.0 - y)
    raise ConfigError(f"unknown activation mode {mode!r}")


def softmax_channels(x):
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if x.shape[1] < 2:
        raise ShapeError("softmax_channels needs at least 2 channels")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(gy, p):
    """Softmax Jacobian-vector product; p is the stored forward output."""
    dot = (gy * p).sum(axis=1, keepdims=True)
    return p * (gy - dot)


def concat_channels(a, b):
    """Concatenate along the channel axis; a's channels come first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(g, first_channels):
    """Inverse of concat_channels for the backward pass."""
    return g[:, :first_channels], g[:, first_channels:]
