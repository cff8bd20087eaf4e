"""Parallel error correction for dense semantic labeling.

Given an RGB image and an initial per-pixel class-probability map, a
propagation branch fixes boundary errors by warping the map along a learned
displacement field, a replacement branch regenerates labels outright, and a
fusion head blends the two per pixel.
"""

__version__ = "0.1.0"

import ctypes as _ctypes

# Large transient arrays dominate the training loop; without these, glibc
# mmap/munmaps every one of them, paying page faults and zero-fill on each
# allocation. Raising the thresholds keeps the heap warm (~25% faster).
try:
    _libc = _ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except OSError:  # non-glibc platform; purely an optimization
    pass

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    NumericError,
    SegCorrectError,
    ShapeError,
)
from .model import build_model, forward_full, backward_full, GradOutputs
from .synth import Sample, augment, corrupt_segmentation, generate_synthetic, make_dataset
from .train import TrainConfig

__all__ = [
    "__version__",
    "SegCorrectError", "ShapeError", "NumericError", "ContractError",
    "ConfigError", "DataError", "FormatError",
    "build_model", "forward_full", "backward_full", "GradOutputs",
    "Sample", "augment", "corrupt_segmentation", "generate_synthetic", "make_dataset",
    "TrainConfig",
]
