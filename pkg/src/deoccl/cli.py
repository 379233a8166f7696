"""``deoccl`` command line: prepare, train, infer, evaluate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .checkpoint import CheckpointError
from .config import DATA_ROOT_ENV, ConfigFileError, RunConfig, load_config_file, resolve
from .dataset import (
    DatasetError,
    LandmarkDetector,
    SampleSource,
    SessionSource,
    discover_sessions,
    get_provider,
    ingest_session,
    split_sessions,
    synthesize_session_masks,
)
from .imaging import BinaryMask, ImageError, ImageTensor, apply_occlusion, load_image, load_mask, resize_crop, save_image
from .network import generator_forward
from .training import (
    TrainingError,
    finetune_user,
    load_checkpoint,
    new_state,
    pretrain_generic,
    save_checkpoint,
    train_occluded,
    write_loss_csv,
)

log = logging.getLogger("deoccl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag name -> RunConfig key, for flags shared by every command
COMMON_FLAGS = {
    "data_root": str,
    "out_root": str,
    "seed": int,
    "device": str,
    "image_size": int,
    "base_filters": int,
    "bottleneck_dim": int,
    "batch_size": int,
    "learning_rate": float,
    "epoch_scale": float,
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="deoccl-config v1 key=value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    for key, kind in COMMON_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(
        prog="deoccl",
        description="Remove HMD occlusion from face images.",
        epilog=f"{DATA_ROOT_ENV} sets the default --data-root. Exit codes: 0 ok, 1 usage/config, 2 data, 3 runtime.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="ingest a raw frame directory and synthesize masks")
    p.add_argument("--frames", required=True, help="directory of raw PNG frames")
    p.add_argument("--subject", required=True)
    p.add_argument("--session", help="session id (default: frames directory name)")
    p.add_argument("--appearance", required=True, help="appearance tag, e.g. clothing or hairstyle")
    p.add_argument("--size", dest="image_size", type=int, default=None)
    p.add_argument("--mask-horizontal-margin", dest="mask_horizontal_margin", type=float, default=None)
    p.add_argument("--mask-vertical-margin", dest="mask_vertical_margin", type=float, default=None)
    p.add_argument("--mask-shape", dest="mask_shape", choices=["rectangle", "rounded-rectangle"], default=None)
    p.add_argument("--landmark-provider", dest="landmark_provider", default=None)

    p = sub.add_parser("train", parents=[common], help="run one training phase or the whole schedule")
    p.add_argument("--step", choices=["1a", "1b", "2", "all"], default="all")
    p.add_argument("--resume", action="store_true", help="continue from <out-root>/checkpoints/latest.ckpt")
    p.add_argument("--generic-root", dest="generic_root", default=None, help="PNG corpus for step 1a")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many generator steps")

    p = sub.add_parser("infer", parents=[common], help="reconstruct unoccluded faces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image or directory of images")
    p.add_argument("--mask", help="mask PNG (or directory with mirrored names); composites the input first")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="score checkpoints on the held-out split")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--labels", help="comma-separated method labels, one per checkpoint")
    p.add_argument("--oracle", action="store_true", help="add the ground-truth upper-bound row")
    p.add_argument("--identity", action="store_true", help="add the occluded-input baseline row")
    p.add_argument("--masked-only", action="store_true", help="also report PSNR inside the mask")
    p.add_argument("--perceptual", help="registered perceptual plugin name")
    p.add_argument("--out", help="report directory (default: <out-root>/eval)")
    return parser


def _resolve(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in RunConfig.__dataclass_fields__ if hasattr(args, k)}
    for item in args.set:
        if "=" not in item:
            raise ConfigFileError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    cfg = resolve(file_values, flags)
    if torch.device(cfg.device).type != "cpu":
        raise ConfigFileError(f"device {cfg.device!r} not supported; this build trains on cpu")
    return cfg


def _echo(cfg: RunConfig, artifacts: dict) -> None:
    print(cfg.to_text(), end="")
    for k, v in artifacts.items():
        print(f"# {k}: {v}")


# ---------------------------------------------------------------- prepare


def cmd_prepare(args, cfg: RunConfig) -> int:
    manifest = ingest_session(
        args.frames, args.subject, args.appearance, cfg.image_size, cfg.data_root, session_id=args.session
    )
    detector = LandmarkDetector(get_provider(cfg.landmark_provider))
    result = synthesize_session_masks(manifest, detector, cfg.mask_spec())
    _echo(cfg, {"manifest": result.manifest.root / "manifest.txt"})
    print(f"frames: {result.written} skipped: {len(result.skipped)}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _user_split(cfg: RunConfig):
    sessions = discover_sessions(cfg.data_root)
    if not sessions:
        raise DatasetError(f"no prepared sessions under {cfg.data_root}")
    holdout = [t.strip() for t in cfg.holdout.split(",") if t.strip()] or None
    return split_sessions(sessions, holdout)


def _generic_corpus(cfg: RunConfig) -> SampleSource:
    root = Path(cfg.generic_root)
    files = sorted(p for p in root.rglob("*.png"))
    if not files:
        raise DatasetError(f"no PNG images in generic corpus {root}")
    images = [resize_crop(load_image(p, "signed").to_rgb(), cfg.image_size) for p in files]
    return SampleSource.from_images(images, prefix="generic")


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_root)
    ckpt_dir = out / "checkpoints"
    latest = ckpt_dir / "latest.ckpt"
    if args.resume:
        if not latest.is_file():
            raise DatasetError(f"--resume given but {latest} does not exist")
        state = load_checkpoint(latest, cfg.network())
        log.info("resuming at phase %s, step %d", state.cursor.phase, state.cursor.step)
    elif args.step in ("1a", "all") or (args.step == "1b" and not (ckpt_dir / "step1a.ckpt").is_file()):
        if args.step == "1b":
            log.warning("no step-1a checkpoint; finetuning from a fresh initialization")
        state = new_state(cfg.network(), cfg.train())
    else:
        prior = [ckpt_dir / "step1a.ckpt"] if args.step == "1b" else [ckpt_dir / "step1b.ckpt", ckpt_dir / "step1a.ckpt"]
        found = next((p for p in prior if p.is_file()), None)
        if found is None:
            raise DatasetError(f"step {args.step} needs a prior-step checkpoint ({prior[0]}) or --resume")
        state = load_checkpoint(found, cfg.network())
    state.config.checkpoint_dir = str(ckpt_dir)

    phases = {"1a": ["1a"], "1b": ["1b"], "2": ["2"], "all": ["1a", "1b", "2"]}[args.step]
    if args.step == "all" and not cfg.generic_root:
        log.warning("no generic corpus configured; skipping step 1a")
        phases = ["1b", "2"]
    # phases finished before a resume are not rerun
    phases = [p for p in phases if p not in state.completed]

    budget = args.max_steps
    start_step = state.cursor.step
    for phase in phases:
        remaining = None if budget is None else budget - (state.cursor.step - start_step)
        if remaining is not None and remaining <= 0:
            break
        if phase == "1a":
            pretrain_generic(state, _generic_corpus(cfg), remaining)
        else:
            train = SessionSource(_user_split(cfg).train_sessions, fill=cfg.fill)
            (finetune_user if phase == "1b" else train_occluded)(state, train, remaining)
        if phase not in state.completed:
            break
    save_checkpoint(state, latest)

    out.mkdir(parents=True, exist_ok=True)
    write_loss_csv(state.history, out / "loss.csv")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    summary = {
        "command": "train",
        "step": args.step,
        "config": cfg.to_dict(),
        "train_config": state.config.to_dict(),
        "completed": state.completed,
        "cursor": vars(state.cursor),
        "boundaries": state.boundaries,
        "steps": state.cursor.step,
        "final_losses": state.history[-1] if state.history else None,
        "artifacts": {"checkpoint": str(latest), "loss_csv": str(out / "loss.csv"), "config": str(out / "config.txt")},
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _echo(cfg, {**summary["artifacts"], "summary": out / "run_summary.json"})
    print(f"steps: {state.cursor.step} completed: {','.join(state.completed) or '-'} boundaries: {len(state.boundaries)}")
    return EXIT_OK


# ---------------------------------------------------------------- infer


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DatasetError(f"no PNG images in {path}")
        return files
    return [path]


def cmd_infer(args, cfg: RunConfig) -> int:
    state = load_checkpoint(args.checkpoint)
    params = state.params
    params.eval()
    size = params.config.image_size
    inputs = _inputs(Path(args.input))
    mask_root = Path(args.mask) if args.mask else None
    out = Path(args.out)
    written = []
    for src in inputs:
        img = load_image(src, "signed").to_rgb()
        if (img.height, img.width) != (size, size):
            img = resize_crop(img, size)
        if mask_root is not None:
            mask = load_mask(mask_root / src.name if mask_root.is_dir() else mask_root)
            img = apply_occlusion(img, mask, cfg.fill)
        else:
            mask = BinaryMask(np.zeros((1, size, size), np.float32))
        with torch.no_grad():
            x_rec, _ = generator_forward(params, img.torch().unsqueeze(0), "attention", mask=mask.torch().unsqueeze(0))
        if not torch.isfinite(x_rec).all():
            raise TrainingError(f"non-finite output for {src.name}")
        target = out / src.name
        save_image(ImageTensor(x_rec[0].clamp(-1, 1).numpy(), "signed"), target)
        written.append(str(target))
    _echo(cfg, {"checkpoint": args.checkpoint, "outputs": out})
    print(f"wrote {len(written)} image(s)")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args, cfg: RunConfig) -> int:
    labels = [s.strip() for s in args.labels.split(",")] if args.labels else []
    if labels and len(labels) != len(args.checkpoint):
        raise UsageError(f"{len(labels)} labels for {len(args.checkpoint)} checkpoints")
    if not (args.checkpoint or args.oracle or args.identity):
        raise UsageError("nothing to evaluate: give --checkpoint, --oracle or --identity")
    labels = labels or [Path(c).stem for c in args.checkpoint]
    test = SessionSource(_user_split(cfg).test_sessions, fill=cfg.fill)
    if len(test) == 0:
        raise DatasetError("empty test split")
    plugin = metrics.get_perceptual(args.perceptual)
    out = Path(args.out or Path(cfg.out_root) / "eval")
    out.mkdir(parents=True, exist_ok=True)

    kw = dict(plugin=plugin, batch_size=min(cfg.batch_size, 16), masked_only=args.masked_only, split="test")
    reports = []
    for path, label in zip(args.checkpoint, labels):
        params = load_checkpoint(path).params
        reports.append(metrics.evaluate(params, test, method_label=label, **kw))
    if args.identity:
        reports.append(metrics.evaluate(None, test, generator=metrics.identity_generator, method_label="occluded-input", **kw))
    if args.oracle:
        reports.append(metrics.evaluate(None, test, generator=metrics.oracle_generator, method_label="oracle", **kw))

    for r in reports:
        r.metadata["run_config"] = cfg.to_dict()
        metrics.write_report(r, out / f"report_{r.method_label}.json")
    rows = metrics.compare_report(reports)
    (out / "comparison.csv").write_text(metrics.table_csv(rows), encoding="utf-8")
    _echo(cfg, {"reports": out, "table": out / "comparison.csv"})
    print(metrics.format_table(rows))
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "infer": cmd_infer, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigFileError, UsageError) as exc:
        print(f"deoccl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ImageError, CheckpointError, FileNotFoundError) as exc:
        print(f"deoccl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RuntimeError, ValueError) as exc:
        print(f"deoccl: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
