"""Synthetic scenes with controlled label corruption.

Scenes are 1-3 anti-aliased shapes (disks, rectangles, triangles) with
class-correlated colors over a textured background; the ground truth is the
exact center-point rasterization. Corruption emulates the two error modes
the refinement branches target: smooth boundary jitter (fixable by
propagating nearby labels) and whole-region label flips (fixable only by
regenerating labels), followed by Gaussian softening of the one-hot map.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .fileio import hsv_to_rgb


@dataclass
class Sample:
    """One training example: image in [-1,1], initial map, hard labels."""

    image: np.ndarray  # (3, h, w) float32
    init_probmap: np.ndarray  # (num_classes, h, w) float32
    gt: np.ndarray  # (h, w) uint8


# ---------------------------------------------------------------------------
# resampling helpers (also used by augmentation)

@lru_cache(maxsize=256)
def _resize_matrix(out_size, in_size, dtype_name):
    """Half-pixel bilinear interpolation matrix (out_size, in_size)."""
    s = np.clip(
        (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5, 0.0, in_size - 1.0
    )
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    f = s - i0
    m = np.zeros((out_size, in_size), dtype=np.dtype(dtype_name))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), (1.0 - f).astype(m.dtype))
    np.add.at(m, (rows, i1), f.astype(m.dtype))
    return m


def resize_bilinear(x, out_h, out_w):
    """Resize the trailing two axes of x bilinearly (half-pixel convention)."""
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    flat = np.ascontiguousarray(x, dtype=x.dtype).reshape(-1, h, w)
    my = _resize_matrix(out_h, h, x.dtype.name)
    mx = _resize_matrix(out_w, w, x.dtype.name)
    out = np.matmul(np.matmul(my, flat), mx.T)
    return out.reshape(lead + (out_h, out_w))


def resize_nearest(x, out_h, out_w):
    """Nearest-neighbor resize of the trailing two axes (keeps labels discrete)."""
    h, w = x.shape[-2:]
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), w - 1)
    return x[..., ys[:, None], xs[None, :]]


def _gaussian_kernel(sigma):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(x, sigma):
    """Separable Gaussian blur of the trailing two axes, edge padding."""
    if sigma <= 0:
        return x
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    for axis in (-2, -1):
        moved = np.moveaxis(x, axis, -1)
        pad = [(0, 0)] * (moved.ndim - 1) + [(r, r)]
        padded = np.pad(moved, pad, mode="edge")
        out = np.zeros_like(moved)
        for i, kv in enumerate(k):
            out += kv * padded[..., i : i + moved.shape[-1]]
        x = np.moveaxis(out, -1, axis)
    return x


# ---------------------------------------------------------------------------
# scene generation

def _class_color(cls, num_classes, rng):
    """Class-correlated but deliberately overlapping colors.

    Hue centers are spread over the wheel with per-instance spread wide
    enough that neighboring classes overlap; appearance alone should not
    decide a label with certainty, or the replacement branch never needs
    the initial map.
    """
    center = (cls - 1) / max(num_classes - 1, 1)
    hue = center + rng.uniform(-0.16, 0.16)
    sat = rng.uniform(0.45, 0.95)
    val = rng.uniform(0.5, 0.95)
    rgb = np.array(hsv_to_rgb(hue, sat, val), dtype=np.float64)
    return np.clip(rgb + rng.normal(0.0, 0.04, size=3), 0.0, 1.0)


def _shape_inside(kind, geom, xs, ys):
    if kind == 0:  # disk
        cx, cy, r = geom
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == 1:  # axis-aligned rectangle
        cx, cy, rx, ry = geom
        return (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)
    # triangle: half-plane test against each directed edge
    vx, vy = geom
    inside = np.ones(xs.shape, dtype=bool)
    area = 0.0
    for i in range(3):
        j = (i + 1) % 3
        area += vx[i] * vy[j] - vx[j] * vy[i]
    orient = 1.0 if area >= 0 else -1.0
    for i in range(3):
        j = (i + 1) % 3
        cross = (vx[j] - vx[i]) * (ys - vy[i]) - (vy[j] - vy[i]) * (xs - vx[i])
        inside &= orient * cross >= 0
    return inside


def _random_shape(rng, size):
    kind = int(rng.integers(0, 3))
    cx = rng.uniform(0.15 * size, 0.85 * size)
    cy = rng.uniform(0.15 * size, 0.85 * size)
    if kind == 0:
        geom = (cx, cy, rng.uniform(0.10 * size, 0.28 * size))
    elif kind == 1:
        geom = (cx, cy, rng.uniform(0.08 * size, 0.26 * size), rng.uniform(0.08 * size, 0.26 * size))
    else:
        r = rng.uniform(0.12 * size, 0.30 * size)
        angles = rng.uniform(0.0, 2.0 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(
            -0.4, 0.4, size=3
        )
        geom = (cx + r * np.cos(angles), cy + r * np.sin(angles))
    return kind, geom


_SUBPIX = (np.arange(4) + 0.5) / 4.0 - 0.5


def _render_scene(rng, size, num_classes, min_shapes, max_shapes):
    """Anti-aliased shapes over textured background, then optics: the final
    image is defocused and noised, so the exact boundary position is soft in
    appearance while the label map stays pixel-exact."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.22, 0.42, size=3)
    g = max(2, size // 8)
    texture = resize_bilinear(rng.normal(0.0, 0.06, size=(3, g, g)), size, size)
    img = base[:, None, None] + texture
    gt = np.zeros((size, size), dtype=np.uint8)

    n_shapes = int(rng.integers(min_shapes, max_shapes + 1)) if max_shapes > 0 else 0
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        kind, geom = _random_shape(rng, size)
        cov = np.zeros((size, size), dtype=np.float64)
        for oy in _SUBPIX:
            for ox in _SUBPIX:
                cov += _shape_inside(kind, geom, xx + ox, yy + oy)
        cov /= 16.0
        gt = np.where(_shape_inside(kind, geom, xx, yy), np.uint8(cls), gt)
        color = _class_color(cls, num_classes, rng)
        img = img * (1.0 - cov) + color[:, None, None] * cov

    img = gaussian_blur(img, 1.0)
    img += rng.normal(0.0, 0.07, size=(3, size, size))
    img = np.clip(img * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)
    return img, gt


def generate_synthetic(seed, count, size, num_classes, min_shapes=1, max_shapes=3):
    """Deterministic list of (image, gt) scenes; per-sample seeds derive from
    a counter, so subsets are stable under any count."""
    if size % 8:
        raise ConfigError(f"size must be divisible by 8, got {size}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    scenes = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        scenes.append(_render_scene(rng, size, num_classes, min_shapes, max_shapes))
    return scenes


# ---------------------------------------------------------------------------
# corruption

def _label_components(mask):
    """4-connected components of a boolean mask, in raster discovery order."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            stack = [(sy, sx)]
            labels[sy, sx] = current
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = current
                        stack.append((ny, nx))
    return labels, current


def corrupt_segmentation(gt, num_classes, boundary_jitter_px, region_flip_rate, blur_sigma, seed):
    """Build the initial probability map by degrading the ground truth.

    Three stages: (a) nearest-neighbor warp of the labels along a smooth
    random field of amplitude boundary_jitter_px, (b) each 4-connected
    foreground component flips to a random wrong class with probability
    region_flip_rate, (c) the one-hot map is Gaussian-blurred with width
    blur_sigma and renormalized. All-zero settings return the exact one-hot
    encoding of gt.
    """
    if not (0.0 <= region_flip_rate <= 1.0):
        raise ConfigError(f"region_flip_rate must be in [0,1], got {region_flip_rate}")
    rng = np.random.default_rng(seed)
    h, w = gt.shape
    labels = gt.copy()

    if boundary_jitter_px > 0:
        g = max(2, h // 16 + 1), max(2, w // 16 + 1)
        field = resize_bilinear(rng.normal(0.0, 1.0, size=(2,) + g), h, w)
        peak = np.abs(field).max()
        if peak > 0:
            field *= boundary_jitter_px / peak
        yy, xx = np.mgrid[0:h, 0:w]
        sx = np.clip(np.rint(xx - field[0]).astype(np.intp), 0, w - 1)
        sy = np.clip(np.rint(yy - field[1]).astype(np.intp), 0, h - 1)
        labels = labels[sy, sx]

    if region_flip_rate > 0:
        for cls in range(1, num_classes):
            comp, n_comp = _label_components(labels == cls)
            for ci in range(1, n_comp + 1):
                if rng.random() < region_flip_rate:
                    wrong = [k for k in range(num_classes) if k != cls]
                    labels = np.where(
                        comp == ci, np.uint8(wrong[rng.integers(len(wrong))]), labels
                    )

    onehot = (labels[None] == np.arange(num_classes, dtype=labels.dtype)[:, None, None])
    prob = onehot.astype(np.float32)
    if blur_sigma > 0:
        # softmax-like outputs are never exactly 0 or 1; a small uniform
        # floor keeps log-loss gradients through the map bounded and leaves
        # the per-pixel argmax (hence the baseline mIoU) unchanged
        prob = gaussian_blur(prob, blur_sigma)
        floor = np.float32(0.02)
        prob = (1.0 - floor) * prob + floor / num_classes
        prob /= prob.sum(axis=0, keepdims=True)
    return prob


def make_dataset(seed, count, size, num_classes, boundary_jitter_px, region_flip_rate,
                 blur_sigma, min_shapes=1, max_shapes=3):
    """Generate scenes and pair each with its corrupted initial map."""
    scenes = generate_synthetic(seed, count, size, num_classes, min_shapes, max_shapes)
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    samples = []
    for i, (image, gt) in enumerate(scenes):
        init = corrupt_segmentation(
            gt, num_classes, boundary_jitter_px, region_flip_rate, blur_sigma,
            seed=base + (1, i),
        )
        samples.append(Sample(image=image, init_probmap=init, gt=gt))
    return samples


# ---------------------------------------------------------------------------
# augmentation

def augment(sample, seed, crop_size, mirror=True, scale=True):
    """Random mirror, random resize in [0.5, 1.5], random crop to crop_size.

    Image and probability map are resampled bilinearly (the map is then
    renormalized), labels with nearest neighbor. When the resized sample is
    smaller than the crop, it is placed at a random offset on a background
    canvas (image 0, map one-hot background, labels 0).
    """
    rng = np.random.default_rng(seed)
    img, prob, gt = sample.image, sample.init_probmap, sample.gt

    if mirror and rng.random() < 0.5:
        img, prob, gt = img[..., ::-1], prob[..., ::-1], gt[..., ::-1]

    h, w = gt.shape
    if scale:
        factor = rng.uniform(0.5, 1.5)
        nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
        if (nh, nw) != (h, w):
            img = resize_bilinear(img, nh, nw)
            prob = resize_bilinear(prob, nh, nw)
            prob = prob / prob.sum(axis=0, keepdims=True)
            gt = resize_nearest(gt, nh, nw)
            h, w = nh, nw

    def place(length):
        if length >= crop_size:
            off = int(rng.integers(0, length - crop_size + 1))
            return slice(off, off + crop_size), slice(0, crop_size)
        off = int(rng.integers(0, crop_size - length + 1))
        return slice(0, length), slice(off, off + length)

    src_y, dst_y = place(h)
    src_x, dst_x = place(w)
    out_img = np.zeros((3, crop_size, crop_size), dtype=np.float32)
    out_prob = np.zeros((prob.shape[0], crop_size, crop_size), dtype=np.float32)
    out_prob[0] = 1.0
    out_gt = np.zeros((crop_size, crop_size), dtype=np.uint8)
    out_img[:, dst_y, dst_x] = img[:, src_y, src_x]
    out_prob[:, dst_y, dst_x] = prob[:, src_y, src_x]
    out_gt[dst_y, dst_x] = gt[src_y, src_x]
    return Sample(image=out_img, init_probmap=out_prob, gt=out_gt)
