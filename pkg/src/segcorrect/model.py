"""The three-branch refinement network.

A shared encoder consumes the RGB image concatenated with the initial
class-probability map. Two mirrored decoders with skip connections follow:
the propagation decoder ends in a tanh flow head whose output warps the
initial map, and the replacement decoder ends in a linear head whose logits
are softmaxed into a fresh map. A fusion head reads both decoders' final
features and predicts a sigmoid mask that blends the two branch outputs.

Channel plan (num_classes = K):

    encoder   conv1_1 (3+K>64) conv1_2 (64>64)   pool
              conv2_1 (64>128) conv2_2 (128>128) pool
              conv3_1 (128>256) conv3_2 (256>256) pool
              conv4_1 (256>256) conv4_2 (256>256)
    decoders  up, +conv3_2: X_conv1_1 (512>256) X_conv1_2 (256>256)
              up, +conv2_2: X_conv2_1 (384>128) X_conv2_2 (128>128)
              up, +conv1_2: X_conv3_1 (192>64)  X_conv3_2 (64>64)
    heads     flow (64>2, tanh)   C_out (64>K, linear)
    fusion    M_conv1 (128>64) M_conv2 (64>64) M_conv3 (64>256)
              mask (256>1, sigmoid)

All convolutions are 3x3, stride 1, same padding; skip joins are channel
concatenation. Spatial dims must be divisible by 8 (three pooling stages).
"""

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import losses, ops, warp
from .errors import ConfigError, ContractError, ShapeError
from .ops import ConvWeights

ALL_BRANCHES = ("prop", "repl", "fuse")

_ENCODER = [
    ("conv1_1", None, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv4_1", 256, 256),
    ("conv4_2", 256, 256),
]

_DECODER = [
    ("conv1_1", 512, 256),
    ("conv1_2", 256, 256),
    ("conv2_1", 384, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 192, 64),
    ("conv3_2", 64, 64),
]

_FUSION = [
    ("M_conv1", 128, 64),
    ("M_conv2", 64, 64),
    ("M_conv3", 64, 256),
    ("mask", 256, 1),
]


def layer_plan(num_classes, branches=ALL_BRANCHES):
    """Ordered (name, in_ch, out_ch) for every conv layer in the model."""
    plan = [(n, 3 + num_classes if ci is None else ci, co) for n, ci, co in _ENCODER]
    if "prop" in branches:
        plan += [(f"E_{n}", ci, co) for n, ci, co in _DECODER]
        plan.append(("flow", 64, 2))
    if "repl" in branches:
        plan += [(f"C_{n}", ci, co) for n, ci, co in _DECODER]
        plan.append(("C_out", 64, num_classes))
    if "fuse" in branches:
        plan += list(_FUSION)
    return plan


def _layer_rng(seed, name):
    # per-layer streams keep the init of shared layers identical across branch subsets
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),))
    )


def build_model(num_classes, seed, branches=ALL_BRANCHES):
    """Xavier-uniform kernels (fan = channels * 9), zero biases.

    Deterministic given (num_classes, seed); shared layers get identical
    draws regardless of which branches are built.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    unknown = set(branches) - set(ALL_BRANCHES)
    if unknown:
        raise ConfigError(f"unknown branches {sorted(unknown)}")
    if "fuse" in branches and not {"prop", "repl"} <= set(branches):
        raise ConfigError("fuse branch requires both prop and repl")
    params = {}
    for name, ci, co in layer_plan(num_classes, branches):
        bound = np.sqrt(6.0 / (9.0 * (ci + co)))
        rng = _layer_rng(seed, name)
        kernel = rng.uniform(-bound, bound, size=(co, ci, 3, 3)).astype(np.float32)
        params[name] = ConvWeights(kernel, np.zeros(co, dtype=np.float32))
    return params


def model_branches(params):
    """Infer which branches a parameter dict covers."""
    branches = []
    if "flow" in params:
        branches.append("prop")
    if "C_out" in params:
        branches.append("repl")
    if "mask" in params:
        branches.append("fuse")
    return tuple(branches)


def num_classes_of(params):
    return params["conv1_1"].in_channels - 3


def flatten_params(params):
    """dict layer -> ConvWeights, flattened to 'layer.kernel'/'layer.bias'."""
    flat = {}
    for name, w in params.items():
        flat[f"{name}.kernel"] = w.kernel
        flat[f"{name}.bias"] = w.bias
    return flat


def unflatten_params(flat):
    layers = {}
    for key in flat:
        name, _, part = key.rpartition(".")
        if part not in ("kernel", "bias") or not name:
            raise ContractError(f"unrecognized parameter entry {key!r}")
        layers.setdefault(name, {})[part] = flat[key]
    params = {}
    for name, parts in layers.items():
        if set(parts) != {"kernel", "bias"}:
            raise ContractError(f"incomplete parameter pair for layer {name!r}")
        params[name] = ConvWeights(parts["kernel"], parts["bias"])
    return params


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, plus the public outputs."""

    params: dict
    max_disp_px: float
    s_init: np.ndarray
    acts: dict = field(default_factory=dict)
    flow_raw: np.ndarray = None
    displacement: np.ndarray = None
    s_prop: np.ndarray = None
    s_repl_logits: np.ndarray = None
    s_repl: np.ndarray = None
    mask: np.ndarray = None
    s_fuse: np.ndarray = None


@dataclass
class GradOutputs:
    """Upstream gradients for backward_full; unused outputs stay None."""

    s_fuse: np.ndarray = None
    s_prop: np.ndarray = None
    s_repl: np.ndarray = None


def forward_full(image, s_init, params, max_disp_px):
    """Run every branch the parameter dict provides.

    image: (n, 3, h, w) in [-1, 1]; s_init: (n, K, h, w) probability map;
    h and w divisible by 8. Returns a ForwardTrace.
    """
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"image must be (n,3,h,w), got {image.shape}")
    n, _, h, w = image.shape
    if h % 8 or w % 8:
        raise ShapeError(f"spatial dims must be divisible by 8, got {h}x{w}")
    if image.size and (image.min() < -1.0 or image.max() > 1.0):
        raise ContractError("image not normalized to [-1, 1]")
    warp.validate_probmap(s_init, what="initial map")
    if s_init.shape[0] != n or s_init.shape[2:] != (h, w):
        raise ShapeError(f"image {image.shape} vs initial map {s_init.shape}")
    if params["conv1_1"].in_channels != 3 + s_init.shape[1]:
        raise ShapeError(
            f"model expects {params['conv1_1'].in_channels - 3} classes, "
            f"initial map has {s_init.shape[1]}"
        )

    tr = ForwardTrace(params=params, max_disp_px=float(max_disp_px), s_init=s_init)
    acts = tr.acts

    def block(name, x, act=None):
        acts[name + ".in"] = x
        y = ops.conv2d(x, params[name])
        if act is not None:
            y = ops.activation(y, act)
            acts[name + ".out"] = y
        return y

    x = block("conv1_1", ops.concat_channels(image, s_init), "relu")
    c12 = block("conv1_2", x, "relu")
    x, acts["pool1"] = ops.maxpool2x2(c12)
    x = block("conv2_1", x, "relu")
    c22 = block("conv2_2", x, "relu")
    x, acts["pool2"] = ops.maxpool2x2(c22)
    x = block("conv3_1", x, "relu")
    c32 = block("conv3_2", x, "relu")
    x, acts["pool3"] = ops.maxpool2x2(c32)
    x = block("conv4_1", x, "relu")
    c42 = block("conv4_2", x, "relu")
    u1 = ops.upsample_bilinear_2x(c42)

    def decoder(prefix):
        y = block(f"{prefix}_conv1_1", ops.concat_channels(u1, c32), "relu")
        y = block(f"{prefix}_conv1_2", y, "relu")
        y = ops.upsample_bilinear_2x(y)
        y = block(f"{prefix}_conv2_1", ops.concat_channels(y, c22), "relu")
        y = block(f"{prefix}_conv2_2", y, "relu")
        y = ops.upsample_bilinear_2x(y)
        y = block(f"{prefix}_conv3_1", ops.concat_channels(y, c12), "relu")
        return block(f"{prefix}_conv3_2", y, "relu")

    e_feat = c_feat = None
    if "flow" in params:
        e_feat = decoder("E")
        tr.flow_raw = block("flow", e_feat, "tanh")
        tr.displacement = warp.displacement_from_flow(tr.flow_raw, max_disp_px)
        tr.s_prop = warp.warp_bilinear(s_init, tr.displacement)
    if "C_out" in params:
        c_feat = decoder("C")
        tr.s_repl_logits = block("C_out", c_feat)
        tr.s_repl = ops.softmax_channels(tr.s_repl_logits)
    if "mask" in params:
        if e_feat is None or c_feat is None:
            raise ContractError("fusion head present without both branches")
        y = block("M_conv1", ops.concat_channels(e_feat, c_feat), "relu")
        y = block("M_conv2", y, "relu")
        y = block("M_conv3", y, "relu")
        tr.mask = block("mask", y, "sigmoid")
        tr.s_fuse = losses.fuse(tr.s_prop, tr.s_repl, tr.mask)
    return tr


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def backward_full(trace, grad_outputs, release=False):
    """Reverse-mode sweep over the assembled graph.

    grad_outputs carries the upstream gradients w.r.t. the branch outputs;
    gradients for the initial map are computed where needed internally but
    not returned (the map is data, not a parameter). Returns a dict of
    per-layer ConvWeights-shaped gradients, deterministically accumulated.

    release=True drops stored activations as they are consumed, shrinking
    the peak working set; the trace cannot be reused afterwards.
    """
    params, acts = trace.params, trace.acts
    for name, g, out in (
        ("s_fuse", grad_outputs.s_fuse, trace.s_fuse),
        ("s_prop", grad_outputs.s_prop, trace.s_prop),
        ("s_repl", grad_outputs.s_repl, trace.s_repl),
    ):
        if g is not None and out is None:
            raise ContractError(f"gradient for {name} but trace has no such output")
        if g is not None and g.shape != out.shape:
            raise ContractError(f"gradient shape {g.shape} != output shape {out.shape}")
    if grad_outputs.s_fuse is None and grad_outputs.s_prop is None and grad_outputs.s_repl is None:
        raise ContractError("no upstream gradients given")

    grads = {}

    def block_back(name, g, act=None):
        if act is not None:
            out = acts.pop(name + ".out") if release else acts[name + ".out"]
            g = ops.activation_backward(g, out, act)
        x = acts.pop(name + ".in") if release else acts[name + ".in"]
        gx, gk, gb = ops.conv2d_backward(g, x, params[name])
        grads[name] = ConvWeights(gk, gb)
        return gx

    def decoder_back(prefix, g):
        g = block_back(f"{prefix}_conv3_2", g, "relu")
        g = block_back(f"{prefix}_conv3_1", g, "relu")
        g_up, g_c12 = ops.split_channels(g, 128)
        g = ops.upsample_bilinear_2x_backward(g_up, (g_up.shape[2] // 2, g_up.shape[3] // 2))
        g = block_back(f"{prefix}_conv2_2", g, "relu")
        g = block_back(f"{prefix}_conv2_1", g, "relu")
        g_up, g_c22 = ops.split_channels(g, 256)
        g = ops.upsample_bilinear_2x_backward(g_up, (g_up.shape[2] // 2, g_up.shape[3] // 2))
        g = block_back(f"{prefix}_conv1_2", g, "relu")
        g = block_back(f"{prefix}_conv1_1", g, "relu")
        g_u1, g_c32 = ops.split_channels(g, 256)
        return g_u1, g_c32, g_c22, g_c12

    g_prop, g_repl = grad_outputs.s_prop, grad_outputs.s_repl
    g_e_feat = g_c_feat = None
    if grad_outputs.s_fuse is not None:
        gp, gr, gm = losses.fuse_backward(
            grad_outputs.s_fuse, trace.s_prop, trace.s_repl, trace.mask
        )
        g_prop = _add(g_prop, gp)
        g_repl = _add(g_repl, gr)
        g = block_back("mask", gm, "sigmoid")
        g = block_back("M_conv3", g, "relu")
        g = block_back("M_conv2", g, "relu")
        g = block_back("M_conv1", g, "relu")
        g_e_feat, g_c_feat = ops.split_channels(g, 64)

    g_u1 = g_c32 = g_c22 = g_c12 = None
    if g_repl is not None or g_c_feat is not None:
        if g_repl is not None:
            gl = ops.softmax_channels_backward(g_repl, trace.s_repl)
            g_c_feat = _add(g_c_feat, block_back("C_out", gl))
        gu, g32, g22, g12 = decoder_back("C", g_c_feat)
        g_u1, g_c32, g_c22, g_c12 = gu, g32, g22, g12
    if g_prop is not None or g_e_feat is not None:
        if g_prop is not None:
            _, gd = warp.warp_bilinear_backward(g_prop, trace.s_init, trace.displacement)
            graw = warp.displacement_from_flow_backward(gd, trace.max_disp_px)
            g_e_feat = _add(g_e_feat, block_back("flow", graw, "tanh"))
        gu, g32, g22, g12 = decoder_back("E", g_e_feat)
        g_u1 = _add(g_u1, gu)
        g_c32 = _add(g_c32, g32)
        g_c22 = _add(g_c22, g22)
        g_c12 = _add(g_c12, g12)

    g = ops.upsample_bilinear_2x_backward(g_u1, (g_u1.shape[2] // 2, g_u1.shape[3] // 2))
    g = block_back("conv4_2", g, "relu")
    g = block_back("conv4_1", g, "relu")
    g = _add(ops.maxpool2x2_backward(g, acts["pool3"]), g_c32)
    g = block_back("conv3_2", g, "relu")
    g = block_back("conv3_1", g, "relu")
    g = _add(ops.maxpool2x2_backward(g, acts["pool2"]), g_c22)
    g = block_back("conv2_2", g, "relu")
    g = block_back("conv2_1", g, "relu")
    g = _add(ops.maxpool2x2_backward(g, acts["pool1"]), g_c12)
    g = block_back("conv1_2", g, "relu")
    block_back("conv1_1", g, "relu")
    return grads
