"""Evaluation and ablation reports: delimited text plus rendered figures.

Each report writer emits a tab-separated table (mean +/- std when several
runs are aggregated, best score per metric marked with ``*``) and a PNG
figure rendered with matplotlib's Agg backend next to it.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

METRIC_ORDER = ("bleu4", "rouge_l", "cider_d")
METRIC_LABELS = {"bleu4": "BLEU-4", "rouge_l": "ROUGE-L", "cider_d": "CIDEr-D"}

REPORT_MAGIC = "NNCAPREPORT"
REPORT_VERSION = 1

_FIG_DPI = 150


def _fmt(mean: float, std: float | None) -> str:
    if std is None:
        return f"{mean:.4f}"
    return f"{mean:.4f} +/- {std:.4f}"


def _aggregate(runs: list[dict[str, float]]) -> dict[str, tuple[float, float | None]]:
    out = {}
    for m in METRIC_ORDER:
        vals = np.array([r[m] for r in runs], dtype=float)
        out[m] = (float(vals.mean()),
                  float(vals.std(ddof=0)) if len(vals) > 1 else None)
    return out


def write_eval_report(runs: list[dict[str, float]], out_prefix: str | Path,
                      title: str = "evaluation") -> Path:
    """One row of metrics (aggregated over runs); returns the table path."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    agg = _aggregate(runs)

    table = out_prefix.with_suffix(".tsv")
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(f"# {REPORT_MAGIC} v{REPORT_VERSION} {title} runs={len(runs)}\n")
        fh.write("metric\tscore\n")
        for m in METRIC_ORDER:
            fh.write(f"{METRIC_LABELS[m]}\t{_fmt(*agg[m])}\n")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    means = [agg[m][0] for m in METRIC_ORDER]
    stds = [agg[m][1] or 0.0 for m in METRIC_ORDER]
    ax.bar(range(len(METRIC_ORDER)), means, yerr=stds, capsize=4,
           color="#4878a8")
    ax.set_xticks(range(len(METRIC_ORDER)))
    ax.set_xticklabels([METRIC_LABELS[m] for m in METRIC_ORDER])
    ax.set_ylabel("score")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_prefix.with_suffix(".png"), dpi=_FIG_DPI)
    plt.close(fig)
    return table


def write_ablation_report(results: dict[str, list[dict[str, float]]],
                          out_prefix: str | Path,
                          title: str = "ablation") -> Path:
    """Rows = conditions, columns = metrics; best per column marked '*'."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    agg = {cond: _aggregate(runs) for cond, runs in results.items()}
    best = {m: max(agg, key=lambda c: agg[c][m][0]) for m in METRIC_ORDER}

    table = out_prefix.with_suffix(".tsv")
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(f"# {REPORT_MAGIC} v{REPORT_VERSION} {title}\n")
        fh.write("method\t" + "\t".join(METRIC_LABELS[m] for m in METRIC_ORDER) + "\n")
        for cond, metrics in agg.items():
            cells = []
            for m in METRIC_ORDER:
                mark = " *" if best[m] == cond else ""
                cells.append(_fmt(*metrics[m]) + mark)
            fh.write(cond + "\t" + "\t".join(cells) + "\n")

    conds = list(results)
    x = np.arange(len(METRIC_ORDER))
    width = 0.8 / len(conds)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for i, cond in enumerate(conds):
        means = [agg[cond][m][0] for m in METRIC_ORDER]
        stds = [agg[cond][m][1] or 0.0 for m in METRIC_ORDER]
        ax.bar(x + (i - (len(conds) - 1) / 2) * width, means, width,
               yerr=stds, capsize=3, label=cond)
    ax.set_xticks(x)
    ax.set_xticklabels([METRIC_LABELS[m] for m in METRIC_ORDER])
    ax.set_ylabel("score")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_prefix.with_suffix(".png"), dpi=_FIG_DPI)
    plt.close(fig)
    return table


def write_training_curves(records, path: str | Path) -> None:
    """Loss curves (train/val) from a list of EpochRecord."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.plot(epochs, [r.train_loss for r in records], marker="o", ms=3,
            label="train loss")
    ax.plot(epochs, [r.val_loss for r in records], marker="s", ms=3,
            label="validation loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
