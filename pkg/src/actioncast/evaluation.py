"""Evaluation protocol: deterministic clip coverage of every test sequence,
forecast accuracy, macro precision/recall, confusion matrix, and progress
accuracy per granularity."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSequence
from .model import (
    ACT_STREAM,
    CombinedModelParams,
    ForecastSample,
    collate_samples,
    forward_combined_batch,
)
from .sampling import EvalClipConfig, enumerate_eval_clips

Array = np.ndarray


@dataclass
class MetricsReport:
    class_names: list[str]
    n_samples: int
    forecast_accuracy: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    mean_precision: float
    mean_recall: float
    confusion: Array  # (C, C) counts, rows = true class
    progress_accuracy: dict[int, float] = field(default_factory=dict)
    present_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "n_samples": self.n_samples,
            "forecast_accuracy": self.forecast_accuracy,
            "per_class_precision": list(self.per_class_precision),
            "per_class_recall": list(self.per_class_recall),
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "confusion": np.asarray(self.confusion, dtype=np.int64).tolist(),
            "progress_accuracy": {str(k): v for k, v in sorted(self.progress_accuracy.items())},
            "present_classes": list(self.present_classes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Human-readable summary."""
        lines = [
            f"samples:            {self.n_samples}",
            f"forecast accuracy:  {self.forecast_accuracy:.4f}",
            f"mean precision:     {self.mean_precision:.4f}",
            f"mean recall:        {self.mean_recall:.4f}",
        ]
        if self.progress_accuracy:
            acc = "  ".join(f"N={n}: {a:.4f}" for n, a in sorted(self.progress_accuracy.items()))
            lines.append(f"progress accuracy:  {acc}")
        lines.append("")
        width = max(len(n) for n in self.class_names)
        lines.append(f"{'class':<{width}}  support  precision  recall")
        support = np.asarray(self.confusion).sum(axis=1)
        for idx, name in enumerate(self.class_names):
            lines.append(
                f"{name:<{width}}  {int(support[idx]):>7d}  "
                f"{self.per_class_precision[idx]:>9.4f}  {self.per_class_recall[idx]:>6.4f}"
            )
        lines.append("")
        lines.append("confusion matrix (rows = true):")
        for idx, name in enumerate(self.class_names):
            row = " ".join(f"{int(v):>5d}" for v in np.asarray(self.confusion)[idx])
            lines.append(f"{name:<{width}}  {row}")
        return "\n".join(lines) + "\n"


def compute_metrics(
    true_classes: Array,
    predicted_classes: Array,
    n_classes: int,
    class_names: list[str] | None = None,
) -> MetricsReport:
    """Confusion-matrix metrics with macro averages over supported classes.

    Classes absent from the truth are excluded from the macro averages; a
    present class that is never predicted contributes precision 0.
    """
    true_classes = np.asarray(true_classes, dtype=np.int64)
    predicted_classes = np.asarray(predicted_classes, dtype=np.int64)
    if true_classes.shape != predicted_classes.shape:
        raise ValueError("true and predicted arrays must have the same shape")
    if true_classes.size == 0:
        raise ValueError("cannot compute metrics without samples")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (true_classes, predicted_classes), 1)

    support = confusion.sum(axis=1)
    predicted_totals = confusion.sum(axis=0)
    tp = np.diag(confusion).astype(np.float64)
    precision = np.divide(
        tp, predicted_totals, out=np.zeros(n_classes), where=predicted_totals > 0
    )
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    present = np.nonzero(support > 0)[0]

    return MetricsReport(
        class_names=list(class_names) if class_names else [str(i) for i in range(n_classes)],
        n_samples=int(true_classes.size),
        forecast_accuracy=float(tp.sum() / true_classes.size),
        per_class_precision=[float(x) for x in precision],
        per_class_recall=[float(x) for x in recall],
        mean_precision=float(precision[present].mean()),
        mean_recall=float(recall[present].mean()),
        confusion=confusion,
        present_classes=[int(i) for i in present],
    )


def predict_progress_bins(params: CombinedModelParams, head_out: Array, granularity: int) -> Array:
    """Per-row predicted bin; argmax for bin heads, rounding for scalar heads."""
    if params.config.progress_loss == "l2":
        return np.clip(np.rint(head_out[:, 0]), 0, granularity - 1).astype(np.int64)
    return np.argmax(head_out, axis=1).astype(np.int64)


def evaluate_samples(
    params: CombinedModelParams,
    samples: list[ForecastSample],
    class_names: list[str] | None = None,
    batch_size: int = 256,
) -> MetricsReport:
    """Metrics of the fused forecast (and progress heads) on fixed samples."""
    if not samples:
        raise ValueError("no evaluation samples")
    cfg = params.config
    trues, preds = [], []
    prog_true: dict[int, list[int]] = {n: [] for n in cfg.granularities}
    prog_pred: dict[int, list[Array]] = {n: [] for n in cfg.granularities}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        clips, targets, bins = collate_samples(chunk, cfg.granularities)
        outputs, _ = forward_combined_batch(params, clips, train=False)
        trues.append(targets)
        preds.append(np.argmax(outputs.fused, axis=1))
        for n in cfg.granularities:
            prog_true[n].extend(bins[n])
            prog_pred[n].append(
                predict_progress_bins(params, outputs.stream_heads[f"g{n}"], n)
            )
    report = compute_metrics(
        np.concatenate(trues), np.concatenate(preds), cfg.n_classes, class_names
    )
    for n in cfg.granularities:
        truth = np.asarray(prog_true[n])
        pred = np.concatenate(prog_pred[n])
        report.progress_accuracy[n] = float(np.mean(truth == pred))
    return report


def evaluate(
    params: CombinedModelParams,
    sequences: list[LabeledSequence],
    eval_cfg: EvalClipConfig | None = None,
    class_names: list[str] | None = None,
) -> MetricsReport:
    """Tile clips deterministically over every sequence and score the model.

    Local-only accuracy (the act stream's own head) is not reported here;
    the fused head is the model's forecast for every configuration,
    including the plain local one.
    """
    cfg = eval_cfg or EvalClipConfig(granularities=params.config.granularities)
    if tuple(cfg.granularities) != params.config.granularities:
        cfg.granularities = params.config.granularities
    samples: list[ForecastSample] = []
    for seq in sequences:
        samples.extend(enumerate_eval_clips(seq, cfg))
    if not samples:
        raise ValueError("evaluation produced no valid clips (is the test split empty?)")
    return evaluate_samples(params, samples, class_names)
