"""Training loop and the three regimes: each branch alone, or the full model.

An independently trained branch owns its complete encoder-decoder; the
joint regime trains both branches plus the fusion head under the three-term
objective. Training is bit-reproducible given the config seed: data order,
augmentation draws and initialization all derive from it.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from . import losses, metrics, model, synth
from .errors import ConfigError, NumericError
from .fileio import ModelCheckpoint
from .model import GradOutputs
from .optim import AdamState, adam_step

REGIMES = ("prop_only", "repl_only", "joint")
_REGIME_BRANCHES = {
    "prop_only": ("prop",),
    "repl_only": ("repl",),
    "joint": ("prop", "repl", "fuse"),
}
_PRIMARY_OUTPUT = {"prop_only": "prop", "repl_only": "repl", "joint": "fuse"}


@dataclass
class TrainConfig:
    regime: str = "joint"
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    max_disp_px: float = 16.0
    num_classes: int = 4
    crop_size: int = 64
    mirror: bool = True
    scale_aug: bool = True
    log_every: int = 50
    eval_every: int = 500

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.crop_size % 8:
            raise ConfigError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.max_disp_px < 0:
            raise ConfigError(f"max_disp_px must be >= 0, got {self.max_disp_px}")
        if self.log_every < 1 or self.eval_every < 1:
            raise ConfigError("log_every and eval_every must be >= 1")
        return self


def branches_for_regime(regime):
    return _REGIME_BRANCHES[regime]


def layer_in_regime(name, regime):
    """Whether a layer belongs to the parameter set a regime trains."""
    if regime == "prop_only":
        return not name.startswith(("C_", "M_")) and name != "mask"
    if regime == "repl_only":
        return not name.startswith(("E_", "M_")) and name not in ("flow", "mask")
    return True


@dataclass
class LogRow:
    iteration: int
    loss: float
    loss_prop: float = None
    loss_repl: float = None
    loss_fuse: float = None
    val_miou: float = None


LOG_HEADER = "iter,loss,loss_prop,loss_repl,loss_fuse,val_miou"


def log_rows_to_csv(rows):
    buf = io.StringIO()
    buf.write(LOG_HEADER + "\n")
    for r in rows:
        cells = [str(r.iteration), repr(r.loss)]
        for v in (r.loss_prop, r.loss_repl, r.loss_fuse, r.val_miou):
            cells.append("" if v is None else repr(v))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


class TrainDivergence(NumericError):
    """Raised when the loss or a gradient goes non-finite; carries a
    diagnostic checkpoint of the parameters at the failing step."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def _stack_batch(samples):
    image = np.stack([s.image for s in samples])
    init = np.stack([s.init_probmap for s in samples])
    gt = np.stack([s.gt for s in samples])
    return image, init, gt


def make_checkpoint(params, num_classes, max_disp_px, state=None):
    flat = model.flatten_params(params)
    adam = None
    if state is not None:
        adam = AdamState(
            t=state.t,
            m={k: v.copy() for k, v in state.m.items()},
            v={k: v.copy() for k, v in state.v.items()},
        )
    return ModelCheckpoint(
        num_classes=num_classes,
        max_disp_px=float(max_disp_px),
        params={k: v.copy() for k, v in flat.items()},
        adam=adam,
    )


def evaluate_miou(params, samples, max_disp_px, output="fuse", batch_size=8,
                  ignore_id=metrics.IGNORE_ID):
    """Aggregate mIoU of one model output over a sample list."""
    num_classes = model.num_classes_of(params)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        image, init, gt = _stack_batch(samples[start : start + batch_size])
        trace = model.forward_full(image, init, params, max_disp_px)
        pred = np.argmax(getattr(trace, f"s_{output}"), axis=1)
        cm += metrics.confusion_matrix(pred, gt, num_classes, ignore_id)
    return metrics.iou_from_confusion(cm)[1]


def _regime_loss(regime, trace, gt):
    """Loss terms and upstream gradients for one step of the given regime."""
    if regime == "joint":
        lf, gf = losses.cross_entropy(trace.s_fuse, gt)
        lp, gp = losses.cross_entropy(trace.s_prop, gt)
        lr, gr = losses.cross_entropy(trace.s_repl, gt)
        total = lf + lp + lr
        return total, {"prop": lp, "repl": lr, "fuse": lf}, GradOutputs(
            s_fuse=gf, s_prop=gp, s_repl=gr
        )
    if regime == "prop_only":
        lp, gp = losses.cross_entropy(trace.s_prop, gt)
        return lp, {"prop": lp}, GradOutputs(s_prop=gp)
    lr, gr = losses.cross_entropy(trace.s_repl, gt)
    return lr, {"repl": lr}, GradOutputs(s_repl=gr)


def train(config, train_samples, val_samples=(), params=None):
    """Run the configured regime; returns (ModelCheckpoint, list of LogRow).

    If `params` is given, only the layers belonging to the regime are run
    and updated; anything else in the dict stays bit-identical.
    """
    config.validate()
    if not train_samples:
        raise ConfigError("training dataset is empty")
    if params is None:
        params = model.build_model(
            config.num_classes, config.seed, branches_for_regime(config.regime)
        )
    active = {k: v for k, v in params.items() if layer_in_regime(k, config.regime)}
    flat = model.flatten_params(active)
    state = AdamState.for_params(flat, lr=config.lr)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(0xBA7C,))
    )
    primary = _PRIMARY_OUTPUT[config.regime]
    rows = []
    for it in range(1, config.iterations + 1):
        picks = rng.integers(0, len(train_samples), size=config.batch_size)
        aug_seeds = rng.integers(0, 2**63, size=config.batch_size)
        batch = [
            synth.augment(
                train_samples[i],
                seed=int(s),
                crop_size=config.crop_size,
                mirror=config.mirror,
                scale=config.scale_aug,
            )
            for i, s in zip(picks, aug_seeds)
        ]
        image, init, gt = _stack_batch(batch)
        trace = model.forward_full(image, init, active, config.max_disp_px)
        total, parts, grad_outputs = _regime_loss(config.regime, trace, gt)
        if not np.isfinite(total):
            raise TrainDivergence(
                f"non-finite loss {total} at iteration {it}",
                make_checkpoint(params, config.num_classes, config.max_disp_px, state),
            )
        grads = model.backward_full(trace, grad_outputs, release=True)
        try:
            adam_step(flat, model.flatten_params(grads), state)
        except NumericError as err:
            raise TrainDivergence(
                f"{err} at iteration {it}",
                make_checkpoint(params, config.num_classes, config.max_disp_px, state),
            ) from err
        if it % config.log_every == 0 or it == config.iterations:
            val = None
            if val_samples and (it % config.eval_every == 0 or it == config.iterations):
                val = evaluate_miou(
                    active, val_samples, config.max_disp_px, output=primary,
                    batch_size=config.batch_size,
                )
            rows.append(
                LogRow(
                    iteration=it,
                    loss=total,
                    loss_prop=parts.get("prop"),
                    loss_repl=parts.get("repl"),
                    loss_fuse=parts.get("fuse"),
                    val_miou=val,
                )
            )
    return make_checkpoint(params, config.num_classes, config.max_disp_px, state), rows
