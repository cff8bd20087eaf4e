#!/usr/bin/env python3
"""Run the synthetic-corruption ablation and write its artifacts.

Trains the full model jointly plus each branch independently on the same
data, then reports validation mIoU against the corrupted-input baseline and
boundary-band curves. Expect hours at the default 2,000 iterations on one
CPU core; use --iterations for a quick pilot.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from segcorrect.experiment import AblationSettings, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="results/ablation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--train-count", type=int, default=200)
    ap.add_argument("--val-count", type=int, default=50)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--direction-attempts", type=int, default=3,
                    help="max seeds for the near-boundary direction check")
    args = ap.parse_args()

    settings = AblationSettings(
        seed=args.seed,
        size=args.size,
        num_classes=args.classes,
        train_count=args.train_count,
        val_count=args.val_count,
        iterations=args.iterations,
    )

    def say(msg):
        print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)

    say(f"ablation: {args.iterations} iterations, seed {args.seed}, out {args.out_dir}")
    result = run_ablation(settings, args.out_dir,
                          direction_attempts=args.direction_attempts, progress=say)

    say(f"total runtime {result.runtime_s / 60:.1f} min")
    print()
    print(f"corrupted input baseline : {result.baseline_miou:.4f}")
    print(f"propagation independent  : {result.indep_prop.miou:.4f}")
    print(f"replacement independent  : {result.indep_repl.miou:.4f}")
    print(f"propagation joint        : {result.joint_mious['prop']:.4f}")
    print(f"replacement joint        : {result.joint_mious['repl']:.4f}")
    print(f"full model (fuse)        : {result.joint_mious['fuse']:.4f}")
    gain = result.joint_mious["fuse"] - result.baseline_miou
    print(f"gain over baseline       : {gain * 100:+.1f} points")
    print(f"near-boundary direction  : {result.direction_checks} "
          f"(pass={result.direction_pass})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
