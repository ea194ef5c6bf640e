"""Run artifacts: delimited outputs (CSV/JSON) plus rendered figures.

Every figure is written next to its machine-readable counterpart so a run
directory is self-contained: loss curves beside the loss CSV, a confusion
heatmap beside the metrics JSON, and the ablation chart beside its table.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricsReport

Array = np.ndarray


# ---------------------------------------------------------------------------
# Loss history
# ---------------------------------------------------------------------------

def write_loss_history_csv(history: list[tuple[int, str, float]], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "term", "value"])
        for step, term, value in history:
            writer.writerow([step, term, f"{value:.10g}"])


def plot_loss_curves(history: list[tuple[int, str, float]], path: Path | str) -> None:
    by_term: dict[str, tuple[list[int], list[float]]] = {}
    for step, term, value in history:
        xs, ys = by_term.setdefault(term, ([], []))
        xs.append(step)
        ys.append(value)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for term in sorted(by_term):
        xs, ys = by_term[term]
        ax.plot(xs, ys, label=term, linewidth=1.0, alpha=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss by term")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def write_metrics(report: MetricsReport, out_dir: Path | str) -> None:
    """metrics.json + metrics.txt + confusion/per-class figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    (out_dir / "metrics.txt").write_text(report.to_table())
    plot_confusion_matrix(
        np.asarray(report.confusion), report.class_names, out_dir / "confusion_matrix.png"
    )
    plot_per_class_metrics(report, out_dir / "per_class_metrics.png")


def plot_confusion_matrix(confusion: Array, class_names: list[str], path: Path | str) -> None:
    confusion = np.asarray(confusion, dtype=np.float64)
    row_sums = confusion.sum(axis=1, keepdims=True)
    normalized = np.divide(confusion, row_sums, out=np.zeros_like(confusion), where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(normalized, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(class_names)))
    ax.set_yticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=90, fontsize=7)
    ax.set_yticklabels(class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title("confusion matrix (row-normalized)")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_per_class_metrics(report: MetricsReport, path: Path | str) -> None:
    n = len(report.class_names)
    x = np.arange(n)
    width = 0.38
    fig, ax = plt.subplots(figsize=(7.5, 4))
    ax.bar(x - width / 2, report.per_class_precision, width, label="precision")
    ax.bar(x + width / 2, report.per_class_recall, width, label="recall")
    ax.set_xticks(x)
    ax.set_xticklabels(report.class_names, rotation=90, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_title(
        f"per-class metrics (accuracy {report.forecast_accuracy:.3f}, "
        f"n={report.n_samples})"
    )
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Ablation sweep
# ---------------------------------------------------------------------------

ABLATION_FIELDS = [
    "configuration", "progress_loss", "seeds",
    "accuracy", "mean_precision", "mean_recall", "delta_vs_local",
]


def write_ablation_table(rows: list[dict], out_dir: Path | str) -> None:
    """ablation.csv + ablation.json + grouped-bar chart.

    Each row: configuration, progress_loss, seeds, accuracy, mean_precision,
    mean_recall, delta_vs_local (accuracy difference to the local baseline
    under the same progress loss).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in ABLATION_FIELDS})
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    plot_ablation(rows, out_dir / "ablation.png")


def format_ablation_table(rows: list[dict]) -> str:
    header = (
        f"{'configuration':<14} {'loss':<14} {'accuracy':>9} "
        f"{'mean prec':>10} {'mean rec':>9} {'delta':>7}"
    )
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['configuration']:<14} {row['progress_loss']:<14} "
            f"{row['accuracy']:>9.4f} {row['mean_precision']:>10.4f} "
            f"{row['mean_recall']:>9.4f} {row['delta_vs_local']:>+7.4f}"
        )
    return "\n".join(lines) + "\n"


def plot_ablation(rows: list[dict], path: Path | str) -> None:
    configs = list(dict.fromkeys(r["configuration"] for r in rows))
    kinds = list(dict.fromkeys(r["progress_loss"] for r in rows))
    x = np.arange(len(configs))
    width = 0.8 / max(len(kinds), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for ki, kind in enumerate(kinds):
        accs = []
        for cfg in configs:
            match = [r for r in rows if r["configuration"] == cfg and r["progress_loss"] == kind]
            accs.append(match[0]["accuracy"] if match else np.nan)
        ax.bar(x + (ki - (len(kinds) - 1) / 2) * width, accs, width, label=kind)
    ax.set_xticks(x)
    ax.set_xticklabels(configs)
    ax.set_ylabel("forecast accuracy")
    ax.set_title("fusion configurations vs progress loss")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
