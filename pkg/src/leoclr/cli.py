"""Command-line entry point: pretraining, the evaluation battery, plotting,
and a desk-scale reproduction pipeline.

Exit codes: 0 on success; 1 with a single `error: ...` line on stderr for any
recognized failure (bad config, missing checkpoint, malformed inputs).
The LEOCLR_OUTPUT_ROOT environment variable supplies a default output root
when a run's config does not set output_dir explicitly.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from . import __version__
from .config import (ConfigError, apply_overrides, build_run_config,
                     default_config_text, load_config_file)
from .data import DatasetError, make_synthetic_corpus
from .encoders import ArchError, ModeError, ShapeError
from .evaluation import (EvalError, ProbeArtifact, ProbeResult,
                         ablate_augmentations, crop_test, diagnostics,
                         finetune_fraction, linear_probe)
from .losses import ConfigurationError, ContractError
from .negatives import QueueError
from .plotting import PlotError, ablation_bars, accuracy_vs_fraction, loss_curves
from .training import (CheckpointError, TrainingError, manifest_from_config,
                       pretrain, resolve_latest)
from .views import PolicyError

_KNOWN_ERRORS = (ConfigError, DatasetError, PolicyError, ShapeError, ModeError,
                 ArchError, QueueError, ContractError, ConfigurationError,
                 TrainingError, CheckpointError, EvalError, PlotError,
                 FileNotFoundError, NotADirectoryError, IsADirectoryError)

ENV_OUTPUT_ROOT = "LEOCLR_OUTPUT_ROOT"


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------

def _entries_from_args(args) -> dict:
    entries = load_config_file(args.config) if getattr(args, "config", None) else {}
    entries = apply_overrides(entries, getattr(args, "override", None) or [])
    root = os.environ.get(ENV_OUTPUT_ROOT)
    if root and "output_dir" not in entries:
        entries["output_dir"] = str(Path(root) / "run")
    return entries


def _config_from_checkpoint(path: str | Path):
    from .evaluation import encoder_from_checkpoint

    return encoder_from_checkpoint(path)[1]


def _eval_manifests(args, cfg):
    """Probe-training and held-out manifests for an eval subcommand."""
    from .data import load_manifest

    if args.train_root or args.eval_root:
        if not (args.train_root and args.eval_root):
            raise EvalError("--train-root and --eval-root must be given together")
        fmt = args.data_format
        return load_manifest(args.train_root, fmt), load_manifest(args.eval_root, fmt)
    if cfg.dataset_format != "synthetic":
        raise EvalError(f"checkpoint was trained on a {cfg.dataset_format!r} corpus; "
                        "pass --train-root/--eval-root")
    train = manifest_from_config(cfg)
    eval_seed = cfg.dataset_seed + 1 if args.eval_seed is None else args.eval_seed
    held_out = make_synthetic_corpus(args.eval_n, cfg.dataset_image_size,
                                     cfg.dataset_num_classes, eval_seed)
    return train, held_out


def _write_result(result: ProbeResult, out: Path, extra: dict) -> None:
    payload = dict(result.__dict__)
    payload.update(extra)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n")


def _load_probe(path: str | Path) -> ProbeArtifact:
    path = Path(path)
    if not path.exists():
        raise EvalError(f"probe artifact not found: {path}")
    payload = torch.load(path, weights_only=False)
    return ProbeArtifact(**payload)


def _save_probe(artifact: ProbeArtifact, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"classifier_state": artifact.classifier_state,
                "feature_dim": artifact.feature_dim,
                "num_classes": artifact.num_classes}, path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = build_run_config(_entries_from_args(args))
    resume = None
    if args.resume is not None:
        resume = resolve_latest(cfg.output_dir) if args.resume == "latest" else args.resume
    final = pretrain(cfg, resume=resume)
    print(f"checkpoint: {final}")
    print(f"config_hash: {cfg.hash()}")
    return 0


def cmd_defaults(args) -> int:
    print(default_config_text(), end="")
    return 0


def cmd_eval_linear(args) -> int:
    cfg = _config_from_checkpoint(args.ckpt)
    train, held_out = _eval_manifests(args, cfg)
    result, artifact = linear_probe(args.ckpt, train, held_out,
                                    epochs=args.epochs, seed=args.seed)
    ckpt = Path(args.ckpt)
    out = Path(args.out) if args.out else ckpt.parent / "eval_linear.json"
    probe_out = Path(args.probe_out) if args.probe_out else ckpt.parent / "probe_head.bin"
    _write_result(result, out, {"checkpoint": str(ckpt), "config_hash": cfg.hash(),
                                "eval_seed": args.seed})
    _save_probe(artifact, probe_out)
    print(f"top1: {result.top1:.4f}")
    print(f"result: {out}")
    print(f"probe: {probe_out}")
    return 0


def cmd_eval_finetune(args) -> int:
    cfg = _config_from_checkpoint(args.ckpt)
    train, held_out = _eval_manifests(args, cfg)
    result = finetune_fraction(args.ckpt, train, held_out, fraction=args.fraction,
                               epochs=args.epochs, seed=args.seed)
    ckpt = Path(args.ckpt)
    out = (Path(args.out) if args.out
           else ckpt.parent / f"eval_finetune_{args.fraction:g}.json")
    _write_result(result, out, {"checkpoint": str(ckpt), "config_hash": cfg.hash(),
                                "eval_seed": args.seed})
    print(f"top1: {result.top1:.4f} (fraction {args.fraction:g}, "
          f"lr {result.notes['selected_lr']:g})")
    print(f"result: {out}")
    return 0


def cmd_eval_crop_test(args) -> int:
    cfg = _config_from_checkpoint(args.ckpt)
    _, held_out = _eval_manifests(args, cfg)
    probe = _load_probe(args.probe)
    draws = cfg.crop_test_draws if args.draws is None else args.draws
    result = crop_test(args.ckpt, held_out, args.mode, probe, draws=draws,
                       seed=args.seed)
    ckpt = Path(args.ckpt)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_crop_{args.mode}.json"
    _write_result(result, out, {"checkpoint": str(ckpt), "config_hash": cfg.hash(),
                                "eval_seed": args.seed})
    print(f"top1: {result.top1:.4f} ({args.mode}, draws {draws})")
    print(f"result: {out}")
    return 0


def cmd_eval_ablate_augs(args) -> int:
    entries = _entries_from_args(args)
    base_cfg = build_run_config(entries)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    if not presets:
        raise EvalError("no presets given")
    train, held_out = _eval_manifests(args, base_cfg)
    grid = ablate_augmentations(entries, presets, train, held_out,
                                probe_epochs=args.probe_epochs, seed=args.seed)
    out_dir = Path(base_cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation_grid.json").write_text(grid.to_json())
    with open(out_dir / "ablation_grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset", "top1", "top5"])
        for name, res in grid.entries:
            writer.writerow([name, f"{res.top1:.6f}",
                             "" if res.top5 is None else f"{res.top5:.6f}"])
    for name, res in grid.entries:
        print(f"{name}: top1 {res.top1:.4f}")
    print(f"grid: {out_dir / 'ablation_grid.json'}")
    return 0


def cmd_eval_diagnostics(args) -> int:
    cfg = _config_from_checkpoint(args.ckpt)
    manifest = manifest_from_config(cfg) if cfg.dataset_format == "synthetic" else None
    if args.train_root:
        from .data import load_manifest

        manifest = load_manifest(args.train_root, args.data_format)
    if manifest is None:
        raise EvalError("pass --train-root for non-synthetic corpora")
    report = diagnostics(args.ckpt, manifest, seed=args.seed,
                         max_samples=args.max_samples)
    ckpt = Path(args.ckpt)
    out = Path(args.out) if args.out else ckpt.parent / "diagnostics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    for key, value in report.items():
        print(f"{key}: {value}")
    print(f"result: {out}")
    return 0


def cmd_plot_loss(args) -> int:
    out = loss_curves(args.metrics, args.out)
    print(f"figure: {out}")
    return 0


def cmd_plot_fractions(args) -> int:
    out = accuracy_vs_fraction(args.results, args.out)
    print(f"figure: {out}")
    return 0


def cmd_plot_ablation(args) -> int:
    out = ablation_bars(args.grid, args.out)
    print(f"figure: {out}")
    return 0


# ---------------------------------------------------------------------------
# desk-scale reproduction
# ---------------------------------------------------------------------------

def _pretrain_worker(entries: dict) -> str:
    cfg = build_run_config(entries)
    return str(pretrain(cfg))


def cmd_reproduce_desk(args) -> int:
    base = _entries_from_args(args)
    out_root = Path(args.out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    tasks = []
    for mode in ("leoclr", "moco_baseline"):
        for seed in range(args.seeds):
            entries = dict(base)
            entries["loss.loss_mode"] = mode
            entries["seed"] = seed
            entries["output_dir"] = str(out_root / f"{mode}_s{seed}")
            build_run_config(entries)  # validate before any heavy work
            tasks.append((mode, seed, entries))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            ckpts = list(pool.map(_pretrain_worker, [t[2] for t in tasks]))
    else:
        ckpts = [_pretrain_worker(entries) for _, _, entries in tasks]

    rows = []
    for (mode, seed, entries), ckpt in zip(tasks, ckpts):
        cfg = build_run_config(entries)
        train, held_out = _eval_manifests(args, cfg)
        result, artifact = linear_probe(ckpt, train, held_out,
                                        epochs=args.probe_epochs, seed=0)
        run_dir = Path(entries["output_dir"])
        _write_result(result, run_dir / "eval_linear.json",
                      {"checkpoint": ckpt, "config_hash": cfg.hash(), "eval_seed": 0})
        _save_probe(artifact, run_dir / "probe_head.bin")
        center = crop_test(ckpt, held_out, "center", artifact)
        random_r = crop_test(ckpt, held_out, "random", artifact,
                             draws=args.draws, seed=0)
        rows.append({"mode": mode, "seed": seed, "checkpoint": ckpt,
                     "linear_top1": result.top1, "center_top1": center.top1,
                     "random_top1": random_r.top1})

    with open(out_root / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    def _mean(mode, key):
        vals = [r[key] for r in rows if r["mode"] == mode]
        return sum(vals) / len(vals)

    summary = {
        "seeds": args.seeds,
        "leoclr_linear_top1_mean": _mean("leoclr", "linear_top1"),
        "moco_baseline_linear_top1_mean": _mean("moco_baseline", "linear_top1"),
    }
    summary["delta"] = (summary["leoclr_linear_top1_mean"]
                        - summary["moco_baseline_linear_top1_mean"])
    (out_root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for row in rows:
        print(f"{row['mode']} seed {row['seed']}: linear {row['linear_top1']:.4f} "
              f"center {row['center_top1']:.4f} random {row['random_top1']:.4f}")
    print(f"delta (leoclr - moco_baseline): {summary['delta']:+.4f}")
    print(f"summary: {out_root / 'summary.json'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_args(p) -> None:
    p.add_argument("--config", help="config file (dotted key = value lines)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def _add_eval_data_args(p) -> None:
    p.add_argument("--train-root", help="probe-training corpus root (folder formats)")
    p.add_argument("--eval-root", help="held-out corpus root (folder formats)")
    p.add_argument("--data-format", default="folder",
                   choices=("folder", "cifar-binary"),
                   help="format of --train-root/--eval-root corpora")
    p.add_argument("--eval-n", type=int, default=256,
                   help="held-out synthetic corpus size")
    p.add_argument("--eval-seed", type=int, default=None,
                   help="held-out synthetic corpus seed (default: train seed + 1)")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed")
    p.add_argument("--out", help="result JSON path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leoclr",
        description="Contrastive pretraining with an uncropped-image anchor, "
                    "plus its evaluation battery.")
    parser.add_argument("--version", action="version", version=f"leoclr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run (or resume) a pretraining")
    _add_config_args(p)
    p.add_argument("--resume", nargs="?", const="latest", default=None,
                   metavar="CKPT", help="resume from a checkpoint "
                   "(bare flag: the output dir's latest)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("defaults", help="print the documented default config")
    p.set_defaults(func=cmd_defaults)

    pe = sub.add_parser("eval", help="evaluation battery")
    esub = pe.add_subparsers(dest="eval_command", required=True)

    p = esub.add_parser("linear", help="frozen-backbone linear probe")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--probe-out", help="where to save the trained head")
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_eval_linear)

    p = esub.add_parser("finetune", help="fine-tune on a balanced label fraction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--epochs", type=int, default=None)
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_eval_finetune)

    p = esub.add_parser("crop-test", help="center vs random eval-crop robustness")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--probe", required=True, help="probe_head.bin from `eval linear`")
    p.add_argument("--mode", required=True, choices=("center", "random"))
    p.add_argument("--draws", type=int, default=None,
                   help="random crops averaged per image")
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_eval_crop_test)

    p = esub.add_parser("ablate-augs", help="pretrain + probe per augmentation preset")
    _add_config_args(p)
    p.add_argument("--presets", default="baseline,crop_only,no_grayscale,no_color")
    p.add_argument("--probe-epochs", type=int, default=None)
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_eval_ablate_augs)

    p = esub.add_parser("diagnostics", help="collapse/quality telemetry")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--max-samples", type=int, default=512)
    p.add_argument("--train-root", help="corpus root (folder formats)")
    p.add_argument("--data-format", default="folder",
                   choices=("folder", "cifar-binary"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_diagnostics)

    pp = sub.add_parser("plot", help="figures from metrics/result files")
    psub = pp.add_subparsers(dest="plot_command", required=True)

    p = psub.add_parser("loss", help="loss curves, one line per run")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_loss)

    p = psub.add_parser("fractions", help="accuracy vs labeled fraction")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_fractions)

    p = psub.add_parser("ablation", help="bar chart of a preset grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_ablation)

    p = sub.add_parser("reproduce-desk",
                       help="anchored vs two-crop pipeline over several seeds")
    _add_config_args(p)
    p.add_argument("--out-root", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel pretraining processes")
    p.add_argument("--probe-epochs", type=int, default=None)
    p.add_argument("--draws", type=int, default=1)
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_reproduce_desk)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        message = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
