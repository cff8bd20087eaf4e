"""Evaluation: confusion matrices, mean IoU, boundary-band curves, F-measure."""

import math

import numpy as np

from .errors import ConfigError, DataError, ShapeError

IGNORE_ID = 255


def confusion_matrix(pred, gt, num_classes, ignore_id=IGNORE_ID):
    """(C, C) counts with gt on rows, predictions on columns.

    Pixels whose gt equals ignore_id are excluded entirely.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    valid = gt != ignore_id
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.max() >= num_classes or p.min() < 0):
        raise DataError(f"prediction id outside [0, {num_classes})")
    if g.size and g.max() >= num_classes:
        raise DataError(f"label id {int(g.max())} >= {num_classes} classes")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def iou_from_confusion(cm):
    """Per-class IoU (NaN for classes absent from both maps) and their mean.

    The mean skips absent classes; if every class is absent (e.g. all pixels
    ignored) the mean is NaN rather than 0.
    """
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = np.full(len(tp), np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    miou = float(np.nanmean(per_class)) if present.any() else math.nan
    return per_class, miou


def mean_iou(pred, gt, num_classes, ignore_id=IGNORE_ID):
    """Returns (per_class list, mIoU). NaN marks undefined entries."""
    per_class, miou = iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_id))
    return list(per_class), miou


def boundary_pixels(gt):
    """Pixels with any 4-neighbor of a different label."""
    b = np.zeros(gt.shape, dtype=bool)
    diff_v = gt[:-1, :] != gt[1:, :]
    diff_h = gt[:, :-1] != gt[:, 1:]
    b[:-1, :] |= diff_v
    b[1:, :] |= diff_v
    b[:, :-1] |= diff_h
    b[:, 1:] |= diff_h
    return b


def distance_to_boundary(gt):
    """Chessboard distance of every pixel to the nearest boundary pixel.

    Brute force over the boundary set; +inf when the map has no boundary.
    """
    h, w = gt.shape
    bpix = np.argwhere(boundary_pixels(gt))
    dist = np.full((h, w), np.inf)
    if len(bpix) == 0:
        return dist
    yy, xx = np.mgrid[0:h, 0:w]
    for chunk in np.array_split(bpix, max(1, len(bpix) // 128)):
        dy = np.abs(yy[None] - chunk[:, 0, None, None])
        dx = np.abs(xx[None] - chunk[:, 1, None, None])
        dist = np.minimum(dist, np.maximum(dy, dx).min(axis=0))
    return dist


def trimap_band(gt, width):
    """Pixels within `width` layers of the label boundary.

    The band counts the boundary pixels themselves as the first layer, so
    width 1 selects exactly the pixels abutting a label edge on either side.
    """
    if width < 1:
        raise ConfigError(f"trimap width must be >= 1, got {width}")
    return distance_to_boundary(gt) <= width - 1


def trimap_curve(pred, gt, widths, num_classes, ignore_id=IGNORE_ID):
    """mIoU restricted to boundary bands of each width; one (width, mIoU)
    pair per entry of `widths` (which must be positive and ascending)."""
    widths = list(widths)
    if any(w < 1 for w in widths) or any(b <= a for a, b in zip(widths, widths[1:])):
        raise ConfigError(f"widths must be positive ascending, got {widths}")
    dist = distance_to_boundary(gt)
    out = []
    for w in widths:
        banded = gt.copy()
        banded[dist > w - 1] = ignore_id
        _, miou = iou_from_confusion(confusion_matrix(pred, banded, num_classes, ignore_id))
        out.append((w, miou))
    return out


def f_measure(pred, gt, class_group):
    """F1 of membership in `class_group` after binarizing both maps.

    Returns 0.0 by convention when precision + recall is 0 (in particular
    when the group is absent from both maps, a degenerate evaluation).
    """
    group = set(class_group)
    if not group:
        raise ConfigError("class_group must be non-empty")
    pm = np.isin(pred, sorted(group))
    gm = np.isin(gt, sorted(group))
    tp = float(np.count_nonzero(pm & gm))
    fp = float(np.count_nonzero(pm & ~gm))
    fn = float(np.count_nonzero(~pm & gm))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
