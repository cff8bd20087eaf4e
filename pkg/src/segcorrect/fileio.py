"""On-disk formats: raw tensors, model checkpoints, PGM/PPM images.

Tensor file (.dtf): magic 'DTF1', u32 LE rank, u32 LE dims, then float32 LE
payload, row-major with batch outermost.

Checkpoint (.ckpt): magic 'SRCK', u32 version (=1), u32 num_classes,
f32 max_disp_px, u32 entry count, then entries of (u16 name length, UTF-8
name, embedded tensor record). Optimizer moments ride along as entries
named 'adam.m.<param>', 'adam.v.<param>' plus a scalar 'adam.t'.

Label maps are binary PGM (P5, maxval 255); colorized maps are binary PPM
(P6) under a fixed 256-entry palette.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .optim import AdamState

TENSOR_MAGIC = b"DTF1"
CHECKPOINT_MAGIC = b"SRCK"
CHECKPOINT_VERSION = 1
_MAX_RANK = 8


class _Reader:
    """Byte cursor that reports the offset of whatever went wrong."""

    def __init__(self, data, name=""):
        self.data = data
        self.off = 0
        self.name = name

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise FormatError(
                f"{self.name}: truncated while reading {what} at offset {self.off} "
                f"(wanted {n} bytes, {len(self.data) - self.off} left)"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what):
        return struct.unpack("<f", self.take(4, what))[0]


def _tensor_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + arr.tobytes()


def _read_tensor(r):
    start = r.off
    magic = r.take(4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(
            f"{r.name}: bad tensor magic {magic!r} at offset {start}, expected {TENSOR_MAGIC!r}"
        )
    rank = r.u32("tensor rank")
    if rank > _MAX_RANK:
        raise FormatError(f"{r.name}: implausible tensor rank {rank} at offset {start + 4}")
    dims = tuple(r.u32(f"dim {i}") for i in range(rank))
    count = 1
    for d in dims:
        count *= d
    payload = r.take(4 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(_tensor_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as f:
        r = _Reader(f.read(), name=str(path))
    arr = _read_tensor(r)
    if r.off != len(r.data):
        raise FormatError(f"{r.name}: {len(r.data) - r.off} trailing bytes at offset {r.off}")
    return arr


@dataclass
class ModelCheckpoint:
    """Named parameter tensors plus metadata, round-trippable to disk.

    Optimizer state keeps moments and the step counter only; hyperparameters
    come from the training configuration.
    """

    num_classes: int
    max_disp_px: float
    params: dict  # flat: 'layer.kernel' / 'layer.bias' -> float32 array
    adam: AdamState = None
    version: int = CHECKPOINT_VERSION

    def to_model_params(self):
        from .model import unflatten_params

        return unflatten_params(self.params)


def save_checkpoint(path, ckpt):
    entries = list(ckpt.params.items())
    if ckpt.adam is not None:
        entries += [(f"adam.m.{k}", v) for k, v in ckpt.adam.m.items()]
        entries += [(f"adam.v.{k}", v) for k, v in ckpt.adam.v.items()]
        entries.append(("adam.t", np.array([ckpt.adam.t], dtype=np.float32)))
    blob = CHECKPOINT_MAGIC + struct.pack(
        "<IIfI", ckpt.version, ckpt.num_classes, ckpt.max_disp_px, len(entries)
    )
    parts = [blob]
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + _tensor_bytes(arr))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as f:
        r = _Reader(f.read(), name=str(path))
    magic = r.take(4, "checkpoint magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(
            f"{r.name}: bad checkpoint magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}"
        )
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{r.name}: unsupported checkpoint version {version}")
    num_classes = r.u32("num_classes")
    max_disp_px = r.f32("max_disp_px")
    count = r.u32("entry count")
    params, adam_m, adam_v = {}, {}, {}
    adam_t = None
    for i in range(count):
        ln = r.u16(f"name length of entry {i}")
        name = r.take(ln, f"name of entry {i}").decode("utf-8")
        arr = _read_tensor(r)
        if name == "adam.t":
            adam_t = int(arr[0])
        elif name.startswith("adam.m."):
            adam_m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[7:]] = arr
        else:
            params[name] = arr
    if r.off != len(r.data):
        raise FormatError(f"{r.name}: {len(r.data) - r.off} trailing bytes at offset {r.off}")
    adam = None
    if adam_t is not None or adam_m:
        adam = AdamState(t=adam_t or 0, m=adam_m, v=adam_v)
    return ModelCheckpoint(
        num_classes=num_classes, max_disp_px=max_disp_px, params=params, adam=adam,
        version=version,
    )


# ---------------------------------------------------------------------------
# PGM / PPM

def _parse_pnm_header(data, magic, name):
    if data[:2] != magic:
        raise FormatError(f"{name}: bad magic {data[:2]!r} at offset 0, expected {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError(f"{name}: truncated header at offset {pos}")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            try:
                fields.append(int(data[start:pos]))
            except ValueError:
                raise FormatError(f"{name}: bad header token at offset {start}") from None
    return fields[0], fields[1], fields[2], pos + 1  # single whitespace then payload


def save_pgm(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h) + labels.tobytes())


def load_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _parse_pnm_header(data, b"P5", str(path))
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    if len(data) - off < w * h:
        raise FormatError(f"{path}: truncated payload at offset {off}")
    return np.frombuffer(data[off : off + w * h], dtype=np.uint8).reshape(h, w).copy()


def save_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _parse_pnm_header(data, b"P6", str(path))
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    if len(data) - off < 3 * w * h:
        raise FormatError(f"{path}: truncated payload at offset {off}")
    return np.frombuffer(data[off : off + 3 * w * h], dtype=np.uint8).reshape(h, w, 3).copy()


def color_palette():
    """Fixed 256-entry palette (the usual bit-interleaved color wheel)."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def colorize_labels(labels):
    return color_palette()[labels]


def hsv_to_rgb(h, s, v):
    """Scalar HSV (each in [0,1]) to an RGB tuple in [0,1]."""
    h = (h % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]


def displacement_to_rgb(disp, max_disp_px):
    """Color-code a (2, h, w) displacement field: hue is direction,
    brightness is magnitude relative to max_disp_px."""
    dx, dy = disp[0].astype(np.float64), disp[1].astype(np.float64)
    mag = np.sqrt(dx * dx + dy * dy)
    scale = max(max_disp_px, 1e-8)
    val = np.clip(mag / scale, 0.0, 1.0)
    hue = (np.arctan2(dy, dx) / (2.0 * np.pi)) % 1.0
    h, w = hue.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            r, g, b = hsv_to_rgb(hue[y, x], 1.0, val[y, x])
            rgb[y, x] = (int(r * 255), int(g * 255), int(b * 255))
    return rgb
