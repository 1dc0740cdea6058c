"""Static figures from run metrics and evaluation results.

Every plot is a pure function of its input files: re-running on the same
inputs redraws the same figure. Uses the Agg backend (no display needed).
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


class PlotError(RuntimeError):
    pass


def _read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise PlotError(f"{path}: no such file")
    records, bad = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            bad.append(f"{path}:{lineno}: {exc.msg}")
            continue
        if not isinstance(rec, dict) or "step" not in rec or "total" not in rec:
            bad.append(f"{path}:{lineno}: not a metrics record")
            continue
        records.append(rec)
    if bad:
        raise PlotError("malformed metrics lines: " + "; ".join(bad))
    if not records:
        raise PlotError(f"{path}: no metrics records")
    return records


def _run_label(metrics_path: Path) -> str:
    prov = metrics_path.parent / "provenance.json"
    if prov.exists():
        try:
            return json.loads(prov.read_text()).get("loss_mode", metrics_path.parent.name)
        except json.JSONDecodeError:
            pass
    return metrics_path.parent.name


def loss_curves(metrics_paths: list[str | Path], out_path: str | Path) -> Path:
    """Overlay total-loss-vs-step curves for one or more runs."""
    if not metrics_paths:
        raise PlotError("no metrics files given")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for mp in metrics_paths:
        mp = Path(mp)
        recs = _read_jsonl(mp)
        steps = [r["step"] for r in recs]
        totals = [r["total"] for r in recs]
        ax.plot(steps, totals, label=_run_label(mp), linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _read_result(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise PlotError(f"{path}: no such file")
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PlotError(f"{path}: {exc.msg}") from exc
    if not isinstance(rec, dict) or "top1" not in rec:
        raise PlotError(f"{path}: not an evaluation result")
    return rec


def accuracy_vs_fraction(result_paths: list[str | Path], out_path: str | Path) -> Path:
    """Top-1 against labeled fraction (log x), one point per result file."""
    if not result_paths:
        raise PlotError("no result files given")
    points = []
    for rp in result_paths:
        rec = _read_result(rp)
        if "label_fraction" not in rec:
            raise PlotError(f"{rp}: result lacks label_fraction")
        points.append((float(rec["label_fraction"]), float(rec["top1"])))
    points.sort()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("labeled fraction")
    ax.set_ylabel("top-1 accuracy")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def ablation_bars(grid_path: str | Path, out_path: str | Path) -> Path:
    """Bar chart of top-1 per augmentation preset from a grid JSON."""
    grid_path = Path(grid_path)
    if not grid_path.exists():
        raise PlotError(f"{grid_path}: no such file")
    try:
        rows = json.loads(grid_path.read_text())
    except json.JSONDecodeError as exc:
        raise PlotError(f"{grid_path}: {exc.msg}") from exc
    if not isinstance(rows, list) or not rows:
        raise PlotError(f"{grid_path}: expected a non-empty grid list")
    for i, row in enumerate(rows):
        if "preset" not in row or "top1" not in row:
            raise PlotError(f"{grid_path}: row {i} lacks preset/top1")
    names = [row["preset"] for row in rows]
    tops = [float(row["top1"]) for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.bar(range(len(names)), tops, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=20)
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
