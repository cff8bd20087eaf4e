"""Differentiable warping of probability maps along a displacement field.

The label-propagation branch predicts per-pixel offsets (dx, dy) in pixel
units; each output pixel then pulls its class distribution from the source
location (x - dx, y - dy) with bilinear weights over the 4 nearest grid
points. Source coordinates are clamped to the image rectangle, which keeps
the interpolation weights a partition of unity and therefore keeps warped
probability maps on the simplex.
"""

import numpy as np

from .errors import ConfigError, ContractError, ShapeError


def validate_probmap(p, sum_tol=1e-5, what="probability map"):
    """Check (n, C, h, w) non-negative values with channel sums of 1."""
    if p.ndim != 4:
        raise ShapeError(f"{what} must be rank 4, got shape {p.shape}")
    if p.size == 0:
        raise ShapeError(f"{what} is empty")
    if p.min() < -1e-6 or p.max() > 1.0 + 1e-6:
        raise ContractError(f"{what} has values outside [0, 1]")
    sums = p.sum(axis=1)
    err = float(np.abs(sums - 1.0).max())
    if err > sum_tol:
        raise ContractError(f"{what} channel sums deviate from 1 by {err:.2e}")


def displacement_from_flow(raw_flow, max_disp_px):
    """Scale the flow head's tanh output into a pixel-unit displacement field.

    raw_flow: (n, 2, h, w) with values in [-1, 1]; channel 0 is dx, 1 is dy.
    """
    if raw_flow.ndim != 4 or raw_flow.shape[1] != 2:
        raise ShapeError(f"flow must be (n,2,h,w), got {raw_flow.shape}")
    if max_disp_px < 0:
        raise ConfigError(f"max_disp_px must be >= 0, got {max_disp_px}")
    if raw_flow.size and (raw_flow.min() < -1.0 or raw_flow.max() > 1.0):
        raise ContractError("raw flow values outside [-1, 1]")
    return raw_flow * raw_flow.dtype.type(max_disp_px)


def displacement_from_flow_backward(g, max_disp_px):
    return g * g.dtype.type(max_disp_px)


def _sample_geometry(s, d):
    """Shared forward/backward geometry: clamped source coords and corners."""
    n, _, h, w = s.shape
    dx, dy = d[:, 0], d[:, 1]
    xs_raw = np.arange(w, dtype=d.dtype)[None, None, :] - dx
    ys_raw = np.arange(h, dtype=d.dtype)[:, None] - dy
    xs = np.clip(xs_raw, 0.0, w - 1.0)
    ys = np.clip(ys_raw, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return xs_raw, ys_raw, xs, ys, x0, y0, x1, y1, fx, fy


def warp_bilinear(s, d):
    """Resample a probability map by a displacement field.

    s: (n, C, h, w) probability map; d: (n, 2, h, w) displacements in pixels.
    Output pixel (x, y) reads from (x - dx, y - dy) bilinearly. Zero
    displacement reproduces s exactly.
    """
    if s.ndim != 4 or d.ndim != 4 or d.shape[1] != 2:
        raise ShapeError(f"warp expects (n,C,h,w) and (n,2,h,w), got {s.shape}, {d.shape}")
    if s.shape[0] != d.shape[0] or s.shape[2:] != d.shape[2:]:
        raise ShapeError(f"warp shape mismatch: {s.shape} vs {d.shape}")
    n, c, h, w = s.shape
    _, _, _, _, x0, y0, x1, y1, fx, fy = _sample_geometry(s, d)
    b = np.arange(n)[:, None, None]
    w00 = ((1 - fy) * (1 - fx))[..., None]
    w01 = ((1 - fy) * fx)[..., None]
    w10 = (fy * (1 - fx))[..., None]
    w11 = (fy * fx)[..., None]
    out = (
        s[b, :, y0, x0] * w00
        + s[b, :, y0, x1] * w01
        + s[b, :, y1, x0] * w10
        + s[b, :, y1, x1] * w11
    )
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def warp_bilinear_backward(g, s, d):
    """Gradients of warp_bilinear w.r.t. the map and the displacements.

    grad_s is the transpose scatter of the sampling weights. grad_d comes
    from the derivative of the bilinear kernel: each corner contributes
    +/- S_k times the weight along the other axis, the sign taken positive
    when the corner coordinate >= the (clamped) sample coordinate, then
    negated because the source coordinate moves opposite to the
    displacement. Clamped-out-of-range samples receive zero gradient.
    """
    n, c, h, w = s.shape
    xs_raw, ys_raw, xs, ys, x0, y0, x1, y1, fx, fy = _sample_geometry(s, d)
    b = np.arange(n)[:, None, None]
    gn = g.transpose(0, 2, 3, 1)  # (n, h, w, C)

    s00 = s[b, :, y0, x0]
    s01 = s[b, :, y0, x1]
    s10 = s[b, :, y1, x0]
    s11 = s[b, :, y1, x1]

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    gs = np.zeros_like(s)
    flat = gs.reshape(n, c, h * w)
    lin00 = (y0 * w + x0).reshape(n, -1)
    lin01 = (y0 * w + x1).reshape(n, -1)
    lin10 = (y1 * w + x0).reshape(n, -1)
    lin11 = (y1 * w + x1).reshape(n, -1)
    for ch in range(c):
        gch = gn[..., ch]
        np.add.at(flat[:, ch], (b[:, :, 0], lin00), (gch * w00).reshape(n, -1))
        np.add.at(flat[:, ch], (b[:, :, 0], lin01), (gch * w01).reshape(n, -1))
        np.add.at(flat[:, ch], (b[:, :, 0], lin10), (gch * w10).reshape(n, -1))
        np.add.at(flat[:, ch], (b[:, :, 0], lin11), (gch * w11).reshape(n, -1))

    # corner signs: >= counts as +, the deterministic subgradient at integers
    sx0 = np.where(x0 >= xs, 1.0, -1.0).astype(s.dtype)
    sx1 = np.where(x1 >= xs, 1.0, -1.0).astype(s.dtype)
    sy0 = np.where(y0 >= ys, 1.0, -1.0).astype(s.dtype)
    sy1 = np.where(y1 >= ys, 1.0, -1.0).astype(s.dtype)

    dxs = (
        (sx0[..., None] * s00 + sx1[..., None] * s01) * (1 - fy)[..., None]
        + (sx0[..., None] * s10 + sx1[..., None] * s11) * fy[..., None]
    )
    dys = (
        (sy0[..., None] * s00 + sy1[..., None] * s10) * (1 - fx)[..., None]
        + (sy0[..., None] * s01 + sy1[..., None] * s11) * fx[..., None]
    )
    gxs = (gn * dxs).sum(axis=-1)
    gys = (gn * dys).sum(axis=-1)

    # clamp saturation kills the gradient outside the image rectangle
    gxs *= ((xs_raw >= 0) & (xs_raw <= w - 1)).astype(s.dtype)
    gys *= ((ys_raw >= 0) & (ys_raw <= h - 1)).astype(s.dtype)

    gd = np.stack([-gxs, -gys], axis=1)
    return gs, gd
