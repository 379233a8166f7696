"""End-to-end desk-scale run on toy data: prepare, train (step 1b + 2), evaluate.

    python scripts/desk_run.py --work desk --epoch-scale 0.02

Uses the same entry points as the ``deoccl`` command.
"""

import argparse
import sys
from pathlib import Path

from deoccl.cli import main as deoccl
from deoccl.synthetic import write_toy_session


def run(argv):
    print("$ deoccl " + " ".join(argv), flush=True)
    code = deoccl(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", default="desk")
    ap.add_argument("--frames", type=int, default=24)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--base-filters", default="8")
    ap.add_argument("--batch-size", default="8")
    ap.add_argument("--learning-rate", default="1e-3")
    ap.add_argument("--epoch-scale", default="0.02")
    args = ap.parse_args()

    work = Path(args.work)
    data, run_dir = work / "data", work / "run"
    for look in range(2):
        raw = write_toy_session(work / "raw" / f"look{look}", args.frames, 2 * args.size, appearance=look)
        run(["prepare", "--frames", str(raw), "--subject", "u0", "--appearance", f"look{look}",
             "--size", str(args.size), "--data-root", str(data)])
    common = ["--data-root", str(data), "--out-root", str(run_dir), "--image-size", str(args.size),
              "--base-filters", args.base_filters, "--batch-size", args.batch_size]
    run(["train", "--step", "all", "--epoch-scale", args.epoch_scale, "--learning-rate", args.learning_rate, *common])
    ck = run_dir / "checkpoints"
    run(["evaluate", *common, "--checkpoint", str(ck / "step2.ckpt"), "--checkpoint", str(ck / "step1b.ckpt"),
         "--labels", "attention,step1-only", "--identity", "--oracle", "--masked-only"])


if __name__ == "__main__":
    main()
