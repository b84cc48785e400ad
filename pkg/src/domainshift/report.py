"""Figure rendering for experiment artifacts.

The report command scans an output directory for the delimited artifacts the
other commands wrote (grid.json, history.jsonl, rq1.csv, *_plotdata.csv) and
renders a PNG next to each one. Rendering is strictly read-only over the data
files; figures carry no information that is not already in them.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_grid(cells: list[dict], path) -> Path:
    """One mean-accuracy heatmap per model over the size grid."""
    if not cells:
        raise DataError("no grid cells to render")
    models = sorted({c["model"] for c in cells})
    n_sources = sorted({c["n_source"] for c in cells})
    n_targets = sorted({c["n_target"] for c in cells})
    fig, axes = plt.subplots(1, len(models), squeeze=False,
                             figsize=(4.2 * len(models), 3.6))
    for ax, model in zip(axes[0], models):
        mat = np.full((len(n_sources), len(n_targets)), np.nan)
        for c in cells:
            if c["model"] != model or c["mean_accuracy"] is None:
                continue
            mat[n_sources.index(c["n_source"]), n_targets.index(c["n_target"])] = \
                c["mean_accuracy"]
        im = ax.imshow(mat, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
        ax.set_title(model)
        ax.set_xticks(range(len(n_targets)), [str(v) for v in n_targets])
        ax.set_yticks(range(len(n_sources)), [str(v) for v in n_sources])
        ax.set_xlabel("target train size")
        ax.set_ylabel("source train size")
        for i in range(len(n_sources)):
            for j in range(len(n_targets)):
                if np.isfinite(mat[i, j]):
                    ax.text(j, i, f"{mat[i, j]:.3f}", ha="center", va="center",
                            color="white", fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, Path(path))


def render_history(points: list[dict], summary: dict, path) -> Path:
    """Validation accuracy curves with the retained checkpoint marked."""
    if not points:
        raise DataError("no validation points to render")
    steps = [p["step"] for p in points]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for key, label in (("source_val_acc", "source val"),
                       ("target_val_acc", "target val")):
        ys = [p.get(key) for p in points]
        if any(y is not None for y in ys):
            xs = [s for s, y in zip(steps, ys) if y is not None]
            ax.plot(xs, [y for y in ys if y is not None], marker="o",
                    markersize=3, label=label)
    if summary.get("best_step"):
        ax.axvline(summary["best_step"], color="gray", linestyle="--",
                   linewidth=1, label=f"best step {summary['best_step']}")
    boundaries = [s for p, s in zip(points, steps) if p.get("phase", 1) == 2]
    if boundaries and boundaries[0] != steps[0]:
        ax.axvline(boundaries[0], color="black", linestyle=":", linewidth=1)
    ax.set_xlabel("training step")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, Path(path))


def render_rq1(rows: list[dict], path) -> Path:
    """Grouped bars: validation accuracy per transform, grouped by domain."""
    if not rows:
        raise DataError("no transform-comparison rows to render")
    domains = sorted({r["domain"] for r in rows})
    transforms = list(dict.fromkeys(r["transform"] for r in rows))
    width = 0.8 / len(domains)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    xs = np.arange(len(transforms))
    for i, domain in enumerate(domains):
        vals = []
        for t in transforms:
            match = [r for r in rows if r["domain"] == domain and r["transform"] == t]
            vals.append(float(match[0]["val_acc"]) if match else np.nan)
        ax.bar(xs + (i - (len(domains) - 1) / 2) * width, vals, width, label=domain)
    ax.set_xticks(xs, transforms)
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def render_timeline(times, truth, pred, path) -> Path:
    """Step plot of predicted (and optionally true) cut activity over time."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise DataError("no frames to render")
    fig, ax = plt.subplots(figsize=(7.2, 2.8))
    if truth is not None:
        ax.step(times, np.asarray(truth, dtype=np.float64) + 1.25, where="post",
                label="truth", color="tab:blue")
    ax.step(times, np.asarray(pred, dtype=np.float64), where="post",
            label="prediction", color="tab:orange")
    ax.set_xlabel("time [s]")
    ax.set_yticks([])
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, Path(path))


def _read_plotdata(path: Path):
    times, truth, pred = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            times.append(float(row["frame_time"]))
            truth.append(float(row["truth"]) if row["truth"] != "" else np.nan)
            pred.append(float(row["prediction"]))
    has_truth = truth and not any(np.isnan(t) for t in truth)
    return times, (truth if has_truth else None), pred


def render_report(out_dir) -> list[Path]:
    """Render a figure for every known artifact in out_dir."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise DataError(f"output directory not found: {out_dir}")
    written = []
    grid = out_dir / "grid.json"
    if grid.is_file():
        doc = json.loads(grid.read_text())
        written.append(render_grid(doc.get("cells", []), out_dir / "grid.png"))
    history = out_dir / "history.jsonl"
    if history.is_file():
        from .train import read_history_jsonl

        points, summary = read_history_jsonl(history)
        written.append(render_history(points, summary, out_dir / "history.png"))
    rq1 = out_dir / "rq1.csv"
    if rq1.is_file():
        with open(rq1, newline="") as fh:
            rows = list(csv.DictReader(fh))
        written.append(render_rq1(rows, out_dir / "rq1.png"))
    for plotdata in sorted(out_dir.glob("*_plotdata.csv")):
        times, truth, pred = _read_plotdata(plotdata)
        out = out_dir / (plotdata.stem.replace("_plotdata", "_timeline") + ".png")
        written.append(render_timeline(times, truth, pred, out))
    if not written:
        raise DataError(f"nothing to render in {out_dir}: expected grid.json, "
                        "history.jsonl, rq1.csv, or *_plotdata.csv")
    return written
