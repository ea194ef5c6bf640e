"""Clip samplers: random equi-spaced training clips, class-balanced batches,
and the deterministic clip tiling used for evaluation.

A clip is ``clip_len`` in-order, equi-spaced frame indices. A clip is valid
when its last frame sits in neither the first nor the last action run of
the sequence and an action change follows it, so a forecast target exists.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSequence
from .losses import progress_bin
from .model import ForecastSample

Array = np.ndarray

log = logging.getLogger(__name__)

PROGRESS_LABEL_MODES = ("prefix", "window")


@dataclass
class SamplerConfig:
    clip_len: int = 10
    balance_classes: bool = True
    granularities: tuple[int, ...] = (5, 10, 20)
    seed: int = 0
    max_stride: int | None = 8
    progress_label_mode: str = "prefix"

    def __post_init__(self) -> None:
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        if self.progress_label_mode not in PROGRESS_LABEL_MODES:
            raise ValueError(f"progress_label_mode must be one of {PROGRESS_LABEL_MODES}")


@dataclass(frozen=True)
class Run:
    class_id: int
    start: int
    stop: int  # exclusive


def label_runs(labels: Array) -> list[Run]:
    """Maximal constant-label segments, in order."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.nonzero(np.diff(labels))[0] + 1
    starts = np.concatenate([[0], change])
    stops = np.concatenate([change, [labels.size]])
    return [Run(int(labels[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def clip_progress_bins(
    last_index: int,
    total_len: int,
    granularities: tuple[int, ...],
    mode: str = "prefix",
) -> dict[int, int]:
    """Progress bin per granularity for a clip ending at ``last_index``.

    "prefix" treats the clip as the (last_index + 1)-frame prefix of the
    sequence; "window" uses the bin that contains the last frame itself.
    The two differ only at exact bin boundaries.
    """
    bins: dict[int, int] = {}
    for n in granularities:
        if mode == "prefix":
            bins[n] = progress_bin(last_index + 1, total_len, n).bin_index
        else:
            bins[n] = (last_index * n) // total_len
    return bins


def _run_index_of(runs: list[Run], frame: int) -> int:
    starts = [r.start for r in runs]
    return int(np.searchsorted(starts, frame, side="right") - 1)


def make_sample(
    seq: LabeledSequence,
    runs: list[Run],
    first: int,
    stride: int,
    cfg: SamplerConfig,
) -> ForecastSample | None:
    """Build a validated sample from a start frame and stride, or None.

    Rejects clips whose last frame lies in the first or last action run
    (end-case exclusion) and clips without a forecast target.
    """
    last = first + (cfg.clip_len - 1) * stride
    if first < 0 or last >= seq.n_frames:
        return None
    run_idx = _run_index_of(runs, last)
    if run_idx <= 0 or run_idx >= len(runs) - 1:
        return None
    target = runs[run_idx + 1].class_id
    indices = np.arange(first, last + 1, stride, dtype=np.int64)[:cfg.clip_len]
    return ForecastSample(
        clip=seq.features[indices],
        next_action=target,
        progress_bins=clip_progress_bins(
            last, seq.n_frames, cfg.granularities, cfg.progress_label_mode
        ),
        sequence_id=seq.source_id,
        clip_frame_indices=indices,
    )


def sample_clip(
    seq: LabeledSequence,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    runs: list[Run] | None = None,
    max_attempts: int = 200,
) -> ForecastSample | None:
    """Draw a random valid clip: uniform start frame, then a stride uniform
    over what fits before the sequence end (capped by ``max_stride``).

    Returns None (with a warning) when no valid clip can be found.
    """
    if runs is None:
        runs = label_runs(seq.labels)
    m = seq.n_frames
    if m < cfg.clip_len or len(runs) < 3:
        log.warning("sequence '%s' too short to sample clips; skipped", seq.source_id)
        return None
    span = cfg.clip_len - 1
    for _ in range(max_attempts):
        if span == 0:
            first = int(rng.integers(m))
            stride = 1
        else:
            first = int(rng.integers(m - span))
            max_stride = (m - 1 - first) // span
            if cfg.max_stride is not None:
                max_stride = min(max_stride, cfg.max_stride)
            if max_stride < 1:
                continue
            stride = int(rng.integers(1, max_stride + 1))
        sample = make_sample(seq, runs, first, stride, cfg)
        if sample is not None:
            return sample
    log.warning("no valid clip found in sequence '%s'; skipped", seq.source_id)
    return None


# ---------------------------------------------------------------------------
# Balanced sampling
# ---------------------------------------------------------------------------

class ClipSampler:
    """Samples clips from a dataset, optionally balancing forecast targets.

    Balanced mode draws a target class uniformly among the classes feasible
    somewhere in the dataset, then samples a clip whose forecast target is
    that class (a run-indexed construction; equivalent in effect to
    rejection sampling but guaranteed to terminate). Unbalanced mode draws
    natural clips, so frequent long actions dominate the targets.
    """

    def __init__(self, sequences: list[LabeledSequence], cfg: SamplerConfig):
        if not sequences:
            raise ValueError("cannot sample from an empty dataset")
        self.sequences = sequences
        self.cfg = cfg
        self.runs = [label_runs(s.labels) for s in sequences]
        # candidate (sequence, run) pairs per target class: clip ends in run r,
        # target is run r+1's class; r can be neither the first nor last run.
        self.candidates: dict[int, list[tuple[int, int]]] = {}
        for si, runs in enumerate(self.runs):
            for r in range(1, len(runs) - 1):
                target = runs[r + 1].class_id
                self.candidates.setdefault(target, []).append((si, r))
        all_classes = sorted(
            {int(c) for s in sequences for c in np.unique(s.labels)}
        )
        self.feasible_classes = sorted(self.candidates)
        infeasible = sorted(set(all_classes) - set(self.feasible_classes))
        if infeasible:
            log.warning(
                "classes %s have no feasible clips; excluded from balancing", infeasible
            )

    def sample_balanced(self, rng: np.random.Generator, max_attempts: int = 200) -> ForecastSample:
        target = self.feasible_classes[int(rng.integers(len(self.feasible_classes)))]
        pairs = self.candidates[target]
        span = self.cfg.clip_len - 1
        for _ in range(max_attempts):
            si, r = pairs[int(rng.integers(len(pairs)))]
            seq, runs = self.sequences[si], self.runs[si]
            run = runs[r]
            last_lo = max(run.start, span)
            if last_lo >= run.stop:
                continue
            last = int(rng.integers(last_lo, run.stop))
            if span == 0:
                stride = 1
            else:
                max_stride = last // span
                if self.cfg.max_stride is not None:
                    max_stride = min(max_stride, self.cfg.max_stride)
                if max_stride < 1:
                    continue
                stride = int(rng.integers(1, max_stride + 1))
            sample = make_sample(seq, runs, last - span * stride, stride, self.cfg)
            if sample is not None:
                return sample
        raise RuntimeError(f"could not construct a clip with target class {target}")

    def sample_natural(self, rng: np.random.Generator) -> ForecastSample:
        for _ in range(200):
            si = int(rng.integers(len(self.sequences)))
            sample = sample_clip(self.sequences[si], self.cfg, rng, runs=self.runs[si])
            if sample is not None:
                return sample
        raise RuntimeError("could not sample a valid clip from the dataset")

    def sample(self, rng: np.random.Generator) -> ForecastSample:
        if self.cfg.balance_classes:
            return self.sample_balanced(rng)
        return self.sample_natural(rng)

    def batch(self, batch_size: int, rng: np.random.Generator) -> list[ForecastSample]:
        return [self.sample(rng) for _ in range(batch_size)]


def balanced_batch(
    sequences: list[LabeledSequence],
    cfg: SamplerConfig,
    batch_size: int,
    rng: np.random.Generator,
) -> list[ForecastSample]:
    """One-shot helper over :class:`ClipSampler` (which amortizes indexing)."""
    return ClipSampler(sequences, cfg).batch(batch_size, rng)


# ---------------------------------------------------------------------------
# Deterministic evaluation clips
# ---------------------------------------------------------------------------

@dataclass
class EvalClipConfig:
    clip_len: int = 10
    frame_stride: int = 3          # spacing between the clip's frames
    window_stride: int | None = None  # spacing between clip starts; default clip_len
    granularities: tuple[int, ...] = (5, 10, 20)
    progress_label_mode: str = "prefix"

    def __post_init__(self) -> None:
        if self.window_stride is None:
            self.window_stride = self.clip_len


def enumerate_eval_clips(
    seq: LabeledSequence,
    cfg: EvalClipConfig,
) -> list[ForecastSample]:
    """Tile clips deterministically across a sequence, skipping invalid ones."""
    sampler_cfg = SamplerConfig(
        clip_len=cfg.clip_len,
        granularities=cfg.granularities,
        progress_label_mode=cfg.progress_label_mode,
        max_stride=None,
    )
    runs = label_runs(seq.labels)
    span = (cfg.clip_len - 1) * cfg.frame_stride
    out = []
    for first in range(0, seq.n_frames - span, cfg.window_stride):
        sample = make_sample(seq, runs, first, cfg.frame_stride, sampler_cfg)
        if sample is not None:
            out.append(sample)
    return out
