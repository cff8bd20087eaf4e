"""Command-line entry point: gen | train | infer | eval.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import fileio, metrics, model, synth, train, warp
from .errors import ConfigError, SegCorrectError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="segcorrect", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset to disk")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=200, help="training samples")
    g.add_argument("--val-count", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--jitter", type=float, default=3.0, help="boundary jitter in px")
    g.add_argument("--flip", type=float, default=0.15, help="region flip rate")
    g.add_argument("--blur", type=float, default=1.0, help="softening sigma")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one regime on config-generated data")
    t.add_argument("--config", help="key=value configuration file")
    t.add_argument("--regime", choices=train.REGIMES, help="overrides the config file")
    t.add_argument("--out-checkpoint", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="refine one image + initial map")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help=".dtf tensor (3,h,w) in [-1,1]")
    i.add_argument("--init-probmap", required=True, help=".dtf tensor (classes,h,w)")
    i.add_argument("--out-prefix", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted label maps against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--trimap-widths", help="e.g. '1..40' or '1,3,5'")
    e.add_argument("--f-group", help="class ids for an F-measure row, e.g. '1,2'")
    e.add_argument("--out", help="also write the CSV here")
    e.set_defaults(func=cmd_eval)
    return p


def cmd_gen(args):
    if args.classes < 2:
        raise ConfigError(f"--classes must be >= 2, got {args.classes}")
    if args.count < 1 or args.val_count < 0:
        raise ConfigError("--count must be >= 1 and --val-count >= 0")
    if args.size % 8:
        raise ConfigError(f"--size must be divisible by 8, got {args.size}")
    out = Path(args.out_dir)
    for part, name, count in ((0, "train", args.count), (1, "val", args.val_count)):
        samples = synth.make_dataset(
            (args.seed, part), count, args.size, args.classes,
            args.jitter, args.flip, args.blur,
        )
        folder = out / name
        folder.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            stem = f"sample_{i:04d}"
            fileio.save_tensor(folder / f"{stem}.image.dtf", s.image)
            fileio.save_tensor(folder / f"{stem}.init.dtf", s.init_probmap)
            fileio.save_pgm(folder / f"{stem}.gt.pgm", s.gt)
    print(f"wrote {args.count} train + {args.val_count} val samples to {out}")
    return 0


def cmd_train(args):
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    if args.regime:
        cfg.regime = args.regime
    cfg.validate()
    train_s = synth.make_dataset(
        (cfg.seed, 0), cfg.train_count, cfg.size, cfg.num_classes,
        cfg.boundary_jitter_px, cfg.region_flip_rate, cfg.blur_sigma,
    )
    val_s = synth.make_dataset(
        (cfg.seed, 1), cfg.val_count, cfg.size, cfg.num_classes,
        cfg.boundary_jitter_px, cfg.region_flip_rate, cfg.blur_sigma,
    )
    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.csv")
    try:
        ckpt, rows = train.train(cfg.to_train_config(), train_s, val_s)
    except train.TrainDivergence as err:
        diag = out.with_suffix(".diverged.ckpt")
        fileio.save_checkpoint(diag, err.checkpoint)
        print(f"error: {err}; diagnostic checkpoint at {diag}", file=sys.stderr)
        return 2
    fileio.save_checkpoint(out, ckpt)
    log_path.write_text(train.log_rows_to_csv(rows))
    last = rows[-1] if rows else None
    tail = f"; final loss {last.loss:.4f}" if last else ""
    if last and last.val_miou is not None:
        tail += f", val mIoU {last.val_miou:.4f}"
    print(f"wrote {out} and {log_path}{tail}")
    return 0


def _load_rank3(path, what):
    arr = fileio.load_tensor(path)
    if arr.ndim != 3:
        raise ConfigError(f"{what} must be rank 3 (channels,h,w), got shape {arr.shape}")
    return arr[None]


def cmd_infer(args):
    ckpt = fileio.load_checkpoint(args.checkpoint)
    params = ckpt.to_model_params()
    image = _load_rank3(args.image, "--image")
    init = _load_rank3(args.init_probmap, "--init-probmap")
    trace = model.forward_full(image, init, params, ckpt.max_disp_px)
    prefix = Path(args.out_prefix)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)

    def emit_probmap(name, prob):
        warp.validate_probmap(prob, what=f"{name} output")
        fileio.save_tensor(f"{prefix}{name}.dtf", prob[0])
        labels = np.argmax(prob[0], axis=0).astype(np.uint8)
        fileio.save_pgm(f"{prefix}{name}.pgm", labels)
        fileio.save_ppm(f"{prefix}{name}.ppm", fileio.colorize_labels(labels))

    written = []
    if trace.s_prop is not None:
        emit_probmap("prop", trace.s_prop)
        fileio.save_tensor(f"{prefix}disp.dtf", trace.displacement[0])
        fileio.save_ppm(
            f"{prefix}disp.ppm",
            fileio.displacement_to_rgb(trace.displacement[0], ckpt.max_disp_px),
        )
        written += ["prop", "disp"]
    if trace.s_repl is not None:
        emit_probmap("repl", trace.s_repl)
        written.append("repl")
    if trace.s_fuse is not None:
        emit_probmap("fuse", trace.s_fuse)
        fileio.save_tensor(f"{prefix}mask.dtf", trace.mask[0])
        written += ["fuse", "mask"]
    print(f"wrote {', '.join(written)} under prefix {prefix}")
    return 0


def parse_widths(spec):
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        try:
            widths = list(range(int(lo), int(hi) + 1))
        except ValueError:
            raise ConfigError(f"bad width range {spec!r}") from None
    else:
        try:
            widths = [int(tok) for tok in spec.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"bad width list {spec!r}") from None
    if not widths or any(w < 1 for w in widths) or sorted(set(widths)) != widths:
        raise ConfigError(f"widths must be positive ascending, got {spec!r}")
    return widths


def cmd_eval(args):
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    pred_files = sorted(pred_dir.glob("*.pgm"))
    if not pred_files:
        print(f"error: no .pgm predictions in {pred_dir}", file=sys.stderr)
        return 2
    pairs, missing = [], []
    for pf in pred_files:
        gf = gt_dir / pf.name
        if gf.exists():
            pairs.append((pf, gf))
        else:
            missing.append(gf)
    if missing:
        for gf in missing:
            print(f"error: missing ground truth {gf}", file=sys.stderr)
        return 2

    widths = parse_widths(args.trimap_widths) if args.trimap_widths else []
    loaded = [(fileio.load_pgm(pf), fileio.load_pgm(gf)) for pf, gf in pairs]
    ids = [m[m != metrics.IGNORE_ID] for pair in loaded for m in pair]
    num_classes = max(2, max((int(v.max()) for v in ids if v.size), default=1) + 1)

    global_cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    band_cms = {w: np.zeros((num_classes, num_classes), dtype=np.int64) for w in widths}
    for pred, gt in loaded:
        global_cm += metrics.confusion_matrix(pred, gt, num_classes)
        if widths:
            dist = metrics.distance_to_boundary(gt)
            for w in widths:
                banded = gt.copy()
                banded[dist > w - 1] = metrics.IGNORE_ID
                band_cms[w] += metrics.confusion_matrix(pred, banded, num_classes)

    lines = ["width,miou", f"global,{metrics.iou_from_confusion(global_cm)[1]!r}"]
    for w in widths:
        lines.append(f"{w},{metrics.iou_from_confusion(band_cms[w])[1]!r}")
    if args.f_group:
        try:
            group = {int(tok) for tok in args.f_group.split(",") if tok.strip()}
        except ValueError:
            raise ConfigError(f"bad class group {args.f_group!r}") from None
        preds = np.concatenate([p.ravel() for p, _ in loaded])
        gts = np.concatenate([g.ravel() for _, g in loaded])
        keep = gts != metrics.IGNORE_ID
        fm = metrics.f_measure(preds[keep], gts[keep], group)
        lines.append(f"f_measure,{fm!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (SegCorrectError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
