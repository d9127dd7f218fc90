"""``deskdet`` command line: generate, train, eval and ablate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .autodiff import CheckpointError
from .boxgeom import format_dump
from .cascade import detect_arrays, filter_ratios
from .config import ConfigError, RunConfig
from .evalkit import EvalReport, evaluate, pr_text
from .netarch import Detector
from .report import plot_ablation, plot_losses, plot_pr_curves
from .synthdata import Scene, export_scenes, generate
from .trainloop import TrainResult, effective_configs, train

log = logging.getLogger("deskdet")

TOGGLES = ("str", "stc", "sml", "fsm", "rfe")
METRICS = ("AP@0.5", "AP@0.6", "AP@0.7", "AP@0.8")


class UsageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# pipeline pieces shared by the commands
# ---------------------------------------------------------------------------

def training_scenes(cfg: RunConfig, threads: int = 1) -> list[Scene]:
    d = cfg.data
    return generate(d.train_seed, d.train_scenes, d.image_size, d.scale_mix, d.aspect_mix, threads)


def evaluation_scenes(cfg: RunConfig, threads: int = 1) -> list[Scene]:
    d = cfg.data
    return generate(d.eval_seed, d.eval_scenes, d.image_size, d.scale_mix, d.aspect_mix, threads)


def run_training(cfg: RunConfig, out_dir, scenes: list[Scene] | None = None) -> TrainResult:
    """Train per ``cfg``; writes the checkpoint, metrics log, effective config and loss figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run.cfg")
    scenes = training_scenes(cfg) if scenes is None else scenes
    result = train(scenes, cfg.model, cfg.cascade, cfg.train, out_dir=out)
    if result.history:
        plot_losses(result.history, out / "losses.png")
    return result


def build_model(cfg: RunConfig, checkpoint=None) -> Detector:
    model_cfg, _ = effective_configs(cfg.model, cfg.cascade, cfg.train)
    if checkpoint is None:
        return Detector(model_cfg, seed=cfg.train.seed)
    return Detector.from_checkpoint(checkpoint, model_cfg)


def run_eval(model: Detector, cfg: RunConfig, out_dir=None, scenes: list[Scene] | None = None,
             label: str = "model") -> EvalReport:
    """Detect on the evaluation scenes and score them; optionally write the report files."""
    _, cascade_cfg = effective_configs(cfg.model, cfg.cascade, cfg.train)
    scenes = evaluation_scenes(cfg) if scenes is None else scenes
    images = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 3, 1, 1), np.float32)
    gts = [s.gts for s in scenes]
    dets = detect_arrays(model, images, cascade_cfg, cfg.inference) if scenes else []
    ratio = None
    if cascade_cfg.stc_levels and scenes:
        _, after = filter_ratios(model, images, gts, cascade_cfg)
        ratio = float(np.mean(after))
    report = evaluate(dets, gts, pos_neg_ratio=ratio)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "pr_curve.txt").write_text(pr_text(report))
        (out / "detections.txt").write_text(format_dump(dets))
        plot_pr_curves({label: report.pr}, out / "pr_curve.png", title="IoU 0.5")
    return report


def toggled(cfg: RunConfig, on: set[str]) -> RunConfig:
    return cfg.with_values({f"use_{t}": t in on for t in TOGGLES})


def ablation_rows(names=TOGGLES) -> list[tuple[str, set[str]]]:
    """Baseline, each module alone, then everything on."""
    return [("baseline", set())] + [(f"+{n.upper()}", {n}) for n in names] + [("all-on", set(names))]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    return config_mod.apply_overrides(cfg, args.override or [])


def _single_thread(args, command: str) -> None:
    if args.threads != 1:
        raise UsageError(f"{command}: --threads must be 1 (parallelism is limited to generate and eval)")


def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        key = "train_seed" if args.split == "train" else "eval_seed"
        cfg = cfg.with_values({key: args.seed})
    scenes = (training_scenes if args.split == "train" else evaluation_scenes)(cfg, args.threads)
    out = export_scenes(scenes, args.out)
    cfg.save(out / "run.cfg")
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    _single_thread(args, "train")
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_values({"seed": args.seed})
    result = run_training(cfg, args.out)
    last = result.history[-1].line() if result.history else "no epochs"
    print(f"checkpoint {result.checkpoint}  final epoch: {last}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_values({"eval_seed": args.seed})
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = build_model(cfg, ckpt)
    scenes = evaluation_scenes(cfg, args.threads)
    report = run_eval(model, cfg, args.out, scenes)
    print(report.summary_line())
    return 0


def cmd_ablate(args) -> int:
    _single_thread(args, "ablate")
    base = _config(args)
    if args.seed is not None:
        base = base.with_values({"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes = training_scenes(base)
    eval_scenes = evaluation_scenes(base)
    rows = []
    curves = {}
    for name, on in ablation_rows():
        cfg = toggled(base, on)
        row_dir = out / name.replace("+", "plus_")
        log.info("ablation row %s", name)
        res = run_training(cfg, row_dir, train_scenes)
        rep = run_eval(res.model, cfg, row_dir, eval_scenes, label=name)
        curves[name] = rep.pr
        row = {"name": name, **{t.upper(): int(t in on) for t in TOGGLES}}
        row.update({f"AP@{k}": v for k, v in rep.ap_by_iou.items()})
        row["small_AP"] = rep.small_ap
        row["FP@0.80"] = rep.fp_at_recall.get("0.80")
        rows.append(row)
    base_ap = {m: rows[0][m] for m in METRICS}
    for row in rows:
        for m in METRICS:
            row[f"d{m}"] = row[m] - base_ap[m]
    (out / "ablation.tsv").write_text(ablation_table(rows))
    plot_ablation(rows, out / "ablation.png")
    plot_pr_curves(curves, out / "ablation_pr.png", title="IoU 0.5")
    sys.stdout.write(ablation_table(rows))
    return 0


def ablation_table(rows) -> str:
    cols = ["name", *(t.upper() for t in TOGGLES), *METRICS, *(f"d{m}" for m in METRICS), "small_AP", "FP@0.80"]

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    lines = ["\t".join(cols)] + ["\t".join(fmt(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging")

    p = sub.add_parser("generate", help="export synthetic scenes as PNG plus a ground-truth sidecar")
    common(p, "scenes")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector and write model.ckpt + metrics.log")
    common(p, "run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints the AP summary line")
    common(p, "eval")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the module toggle table")
    common(p, "ablation")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: unreadable checkpoint: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        if "topology mismatch" in str(exc):
            print(f"error: {exc}", file=sys.stderr)
            return 3
        raise


if __name__ == "__main__":
    sys.exit(main())
