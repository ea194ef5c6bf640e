"""Training loop: balanced clip batches, Adam with global-norm clipping,
per-term loss history, per-epoch validation, and checkpointing."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledSequence
from .evaluation import MetricsReport, evaluate
from .model import (
    CombinedModelParams,
    LossWeights,
    ModelConfig,
    collate_samples,
    from_param_dict,
    init_combined_model,
    loss_and_grads,
    save_checkpoint,
    to_param_dict,
)
from .nn import AdamConfig, AdamState, adam_step, clip_by_global_norm
from .sampling import ClipSampler, EvalClipConfig, SamplerConfig

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; diagnostics were dumped if possible."""


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float | None = 5.0

    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon)


@dataclass
class TrainConfig:
    epochs: int = 15
    batches_per_epoch: int = 100
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval_clips: EvalClipConfig = field(default_factory=EvalClipConfig)


@dataclass
class TrainResult:
    params: CombinedModelParams        # best by validation accuracy (last if no val)
    last_params: CombinedModelParams
    history: list[tuple[int, str, float]]  # (step, term, value)
    val_accuracy: list[tuple[int, float]]  # (epoch, fused accuracy on val split)
    best_epoch: int


def split_validation(
    sequences: list[LabeledSequence], fraction: float
) -> tuple[list[LabeledSequence], list[LabeledSequence]]:
    """Hold out the last ``fraction`` of sequences (by id order) for validation."""
    if fraction <= 0 or len(sequences) < 2:
        return list(sequences), []
    ordered = sorted(sequences, key=lambda s: s.source_id)
    n_val = max(1, round(len(ordered) * fraction))
    if n_val >= len(ordered):
        n_val = len(ordered) - 1
    return ordered[:-n_val], ordered[-n_val:]


def _dump_divergence(out_dir: Path | None, step: int, batch, terms) -> None:
    if out_dir is None:
        return
    payload = {
        "step": step,
        "terms": {k: float(v) for k, v in terms.items()},
        "batch": [
            {
                "sequence_id": s.sequence_id,
                "frames": s.clip_frame_indices.tolist(),
                "next_action": int(s.next_action),
                "progress_bins": {str(k): int(v) for k, v in s.progress_bins.items()},
            }
            for s in batch
        ],
    }
    (out_dir / "divergence_dump.json").write_text(json.dumps(payload, indent=2))


def train(
    model_config: ModelConfig,
    sequences: list[LabeledSequence],
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    checkpoint_extra: dict | None = None,
) -> TrainResult:
    """Train a model; deterministic given the seed.

    Writes ``checkpoint_last.ckpt`` and ``checkpoint_best.ckpt`` plus the
    loss history into ``out_dir`` when given. An epoch is a fixed number of
    sampled batches; validation holds out a fraction of the training
    sequences by id.
    """
    if not sequences:
        raise ValueError("empty training set")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    train_seqs, val_seqs = split_validation(sequences, cfg.val_fraction)
    train_ids = {s.source_id for s in train_seqs}
    assert train_ids.isdisjoint(s.source_id for s in val_seqs), "train/val overlap"

    sampler_cfg = cfg.sampler
    if tuple(sampler_cfg.granularities) != model_config.granularities:
        sampler_cfg = SamplerConfig(
            clip_len=sampler_cfg.clip_len,
            balance_classes=sampler_cfg.balance_classes,
            granularities=model_config.granularities,
            seed=sampler_cfg.seed,
            max_stride=sampler_cfg.max_stride,
            progress_label_mode=sampler_cfg.progress_label_mode,
        )
    sampler = ClipSampler(train_seqs, sampler_cfg)

    rng = np.random.default_rng(cfg.seed)
    params = init_combined_model(model_config, rng)
    tensors = to_param_dict(params)
    state = AdamState.initial(tensors, cfg.optimizer.adam())

    val_cfg = cfg.eval_clips
    history: list[tuple[int, str, float]] = []
    val_curve: list[tuple[int, float]] = []
    best_acc = -1.0
    best_epoch = -1
    best_tensors = {k: v.copy() for k, v in tensors.items()}

    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.batches_per_epoch):
            batch = sampler.batch(cfg.batch_size, rng)
            clips, targets, bins = collate_samples(batch, model_config.granularities)
            params = from_param_dict(model_config, tensors)
            terms, grads = loss_and_grads(
                params, clips, targets, bins, cfg.weights, train=True, rng=rng
            )
            if not np.isfinite(terms["total"]):
                _dump_divergence(out_path, step, batch, terms)
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: {terms['total']!r}"
                )
            step += 1
            for term, value in terms.items():
                history.append((step, term, float(value)))
            grads, _ = clip_by_global_norm(grads, cfg.optimizer.grad_clip_norm)
            tensors, state = adam_step(tensors, grads, state)

        params = from_param_dict(model_config, tensors)
        if val_seqs:
            val_report = evaluate(params, val_seqs, val_cfg)
            val_curve.append((epoch, val_report.forecast_accuracy))
            log.info(
                "epoch %d: loss %.4f, val accuracy %.4f",
                epoch, history[-len(terms)][2], val_report.forecast_accuracy,
            )
            if val_report.forecast_accuracy > best_acc:
                best_acc = val_report.forecast_accuracy
                best_epoch = epoch
                best_tensors = {k: v.copy() for k, v in tensors.items()}
        else:
            best_epoch = epoch
            best_tensors = {k: v.copy() for k, v in tensors.items()}
        if out_path is not None:
            save_checkpoint(out_path / "checkpoint_last.ckpt", params, checkpoint_extra)
            save_checkpoint(
                out_path / "checkpoint_best.ckpt",
                from_param_dict(model_config, best_tensors),
                checkpoint_extra,
            )

    last_params = from_param_dict(model_config, tensors)
    best_params = from_param_dict(model_config, best_tensors)
    return TrainResult(
        params=best_params,
        last_params=last_params,
        history=history,
        val_accuracy=val_curve,
        best_epoch=best_epoch,
    )
