"""Training objectives: per-pixel cross-entropy on probability maps, the
masked blend of the two branch outputs, and the joint three-term loss.

Losses operate on probabilities (not logits) with a 1e-12 clamp inside the
log; the propagation branch only ever exists as a warped distribution, so a
single probability-space loss keeps the three terms commensurate.
"""

import numpy as np

from .errors import DataError, ShapeError

IGNORE_ID = 255
LOG_CLAMP = 1e-12


def cross_entropy(pred, gt, ignore_id=IGNORE_ID):
    """Mean over non-ignored pixels of -log(pred[gt class]).

    pred: (n, C, h, w) probabilities; gt: (n, h, w) integer labels.
    Returns (loss, grad) where grad routes -1/(n_valid * clamped_prob) to
    the ground-truth channel. All-ignored input yields (0.0, zeros).
    """
    if pred.ndim != 4 or gt.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ShapeError(f"cross_entropy shapes: pred {pred.shape}, gt {gt.shape}")
    c = pred.shape[1]
    valid = gt != ignore_id
    n_valid = int(valid.sum())
    grad = np.zeros_like(pred)
    if n_valid == 0:
        return 0.0, grad
    if int(gt[valid].max()) >= c:
        raise DataError(f"label id {int(gt[valid].max())} >= {c} classes")
    idx = np.where(valid, gt, 0).astype(np.intp)[:, None]
    p = np.take_along_axis(pred, idx, axis=1)[:, 0]
    p = np.maximum(p, pred.dtype.type(LOG_CLAMP))
    loss = float(-np.log(p[valid]).sum(dtype=np.float64) / n_valid)
    gval = np.where(valid, -1.0 / (n_valid * p.astype(np.float64)), 0.0)
    np.put_along_axis(grad, idx, gval[:, None].astype(pred.dtype), axis=1)
    return loss, grad


def fuse(s_prop, s_repl, m):
    """Blend the branch outputs with a per-pixel mask: m*prop + (1-m)*repl.

    m: (n, 1, h, w) in [0, 1], broadcast across the class channels.
    """
    if s_prop.shape != s_repl.shape:
        raise ShapeError(f"branch shapes differ: {s_prop.shape} vs {s_repl.shape}")
    if m.shape != (s_prop.shape[0], 1) + s_prop.shape[2:]:
        raise ShapeError(f"mask shape {m.shape} does not match {s_prop.shape}")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ShapeError("mask values outside [0, 1]")
    return m * s_prop + (1.0 - m) * s_repl


def fuse_backward(g, s_prop, s_repl, m):
    """Gradients of fuse w.r.t. (s_prop, s_repl, m)."""
    g_prop = g * m
    g_repl = g * (1.0 - m)
    g_m = (g * (s_prop - s_repl)).sum(axis=1, keepdims=True)
    return g_prop, g_repl, g_m


def total_loss(s_fuse, s_prop, s_repl, gt, ignore_id=IGNORE_ID):
    """Joint objective: CE(gt, fuse) + CE(gt, prop) + CE(gt, repl), unit weights.

    Returns (loss, (g_fuse, g_prop, g_repl)); the gradients are w.r.t. each
    argument independently, chaining through the blend is the caller's job.
    """
    lf, gf = cross_entropy(s_fuse, gt, ignore_id)
    lp, gp = cross_entropy(s_prop, gt, ignore_id)
    lr, gr = cross_entropy(s_repl, gt, ignore_id)
    return lf + lp + lr, (gf, gp, gr)
