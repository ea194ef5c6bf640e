"""Four-stream forecasting model.

One stream ("act") is trained to predict the next distinct action directly
from a clip; the others ("g5", "g10", ...) classify how far through the
task the clip sits, at their own granularity. Every stream is a two-layer
LSTM followed by a projection to a fixed-width feature; a fusion head over
the concatenated stream features produces the final action forecast, while
each stream keeps its own auxiliary head and loss.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .nn import (
    Array,
    LstmLayerParams,
    LstmStackCache,
    lstm_stack_backward,
    lstm_stack_forward,
    relu,
    uniform_fan_in,
)

PROGRESS_LOSSES = ("cross_entropy", "cploss", "l2")
ACT_STREAM = "act"


@dataclass
class ModelConfig:
    input_dim: int
    n_classes: int
    granularities: tuple[int, ...] = (5, 10, 20)
    hidden_size: int = 32
    n_layers: int = 2
    proj_dim: int = 100
    dropout: float = 0.2
    progress_loss: str = "cploss"

    def __post_init__(self) -> None:
        self.granularities = tuple(sorted(int(n) for n in self.granularities))
        if self.progress_loss not in PROGRESS_LOSSES:
            raise ValueError(f"progress_loss must be one of {PROGRESS_LOSSES}")
        if min(self.granularities, default=1) < 1:
            raise ValueError("granularities must be >= 1")

    def stream_names(self) -> list[str]:
        return [ACT_STREAM] + [f"g{n}" for n in self.granularities]

    def granularity_of(self, stream: str) -> int:
        if not stream.startswith("g"):
            raise ValueError(f"stream '{stream}' has no granularity")
        return int(stream[1:])

    def head_size(self, stream: str) -> int:
        if stream == ACT_STREAM:
            return self.n_classes
        if self.progress_loss == "l2":
            return 1  # scalar progress regression
        return self.granularity_of(stream)

    @property
    def fusion_input_dim(self) -> int:
        return self.proj_dim * len(self.stream_names())

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["granularities"] = list(self.granularities)
        return d

    @classmethod
    def from_dict(cls, blob: dict) -> "ModelConfig":
        blob = dict(blob)
        blob["granularities"] = tuple(blob.get("granularities", ()))
        return cls(**blob)


@dataclass
class StreamParams:
    lstm: list[LstmLayerParams]
    proj_w: Array  # (proj_dim, hidden)
    proj_b: Array
    head_w: Array  # (head_size, proj_dim)
    head_b: Array


@dataclass
class CombinedModelParams:
    config: ModelConfig
    streams: dict[str, StreamParams]
    fusion_w: Array  # (n_classes, proj_dim * n_streams)
    fusion_b: Array


def init_combined_model(config: ModelConfig, rng: np.random.Generator) -> CombinedModelParams:
    streams: dict[str, StreamParams] = {}
    for name in config.stream_names():
        layers = []
        in_dim = config.input_dim
        for _ in range(config.n_layers):
            layers.append(LstmLayerParams.initialize(in_dim, config.hidden_size, rng))
            in_dim = config.hidden_size
        head_size = config.head_size(name)
        streams[name] = StreamParams(
            lstm=layers,
            proj_w=uniform_fan_in(rng, (config.proj_dim, config.hidden_size), config.hidden_size),
            proj_b=np.zeros(config.proj_dim),
            head_w=uniform_fan_in(rng, (head_size, config.proj_dim), config.proj_dim),
            head_b=np.zeros(head_size),
        )
    fusion_in = config.fusion_input_dim
    return CombinedModelParams(
        config=config,
        streams=streams,
        fusion_w=uniform_fan_in(rng, (config.n_classes, fusion_in), fusion_in),
        fusion_b=np.zeros(config.n_classes),
    )


# ---------------------------------------------------------------------------
# Named flat parameter view (Adam, checkpoints, gradient checks)
# ---------------------------------------------------------------------------

def to_param_dict(params: CombinedModelParams) -> dict[str, Array]:
    out: dict[str, Array] = {}
    for name in params.config.stream_names():
        s = params.streams[name]
        for i, layer in enumerate(s.lstm):
            out[f"{name}/lstm{i}/w_x"] = layer.w_x
            out[f"{name}/lstm{i}/w_h"] = layer.w_h
            out[f"{name}/lstm{i}/b"] = layer.b
        out[f"{name}/proj_w"] = s.proj_w
        out[f"{name}/proj_b"] = s.proj_b
        out[f"{name}/head_w"] = s.head_w
        out[f"{name}/head_b"] = s.head_b
    out["fusion/w"] = params.fusion_w
    out["fusion/b"] = params.fusion_b
    return out


def from_param_dict(config: ModelConfig, tensors: dict[str, Array]) -> CombinedModelParams:
    streams: dict[str, StreamParams] = {}
    for name in config.stream_names():
        layers = []
        for i in range(config.n_layers):
            layers.append(
                LstmLayerParams(
                    w_x=tensors[f"{name}/lstm{i}/w_x"],
                    w_h=tensors[f"{name}/lstm{i}/w_h"],
                    b=tensors[f"{name}/lstm{i}/b"],
                )
            )
        streams[name] = StreamParams(
            lstm=layers,
            proj_w=tensors[f"{name}/proj_w"],
            proj_b=tensors[f"{name}/proj_b"],
            head_w=tensors[f"{name}/head_w"],
            head_b=tensors[f"{name}/head_b"],
        )
    return CombinedModelParams(
        config=config,
        streams=streams,
        fusion_w=tensors["fusion/w"],
        fusion_b=tensors["fusion/b"],
    )


def parameter_count(params: CombinedModelParams) -> int:
    return sum(t.size for t in to_param_dict(params).values())


# ---------------------------------------------------------------------------
# Forecast samples
# ---------------------------------------------------------------------------

def forecast_target(labels: Array, last_index: int) -> int:
    """Class of the first frame after ``last_index`` whose label differs from
    the label at ``last_index``.

    Raises ValueError when no differing label follows (the clip ends inside
    the final action); samplers reject such clips. Callers are also expected
    to reject clips ending in a sequence's first action run.
    """
    labels = np.asarray(labels)
    if not 0 <= last_index < labels.shape[0]:
        raise ValueError(f"last_index {last_index} outside sequence of {labels.shape[0]} frames")
    current = labels[last_index]
    after = labels[last_index + 1:]
    differing = np.nonzero(after != current)[0]
    if differing.size == 0:
        raise ValueError(
            f"no action change after frame {last_index}; clip ends in the final action"
        )
    return int(after[differing[0]])


@dataclass
class ForecastSample:
    """One training/evaluation example: a clip, its forecast target, and the
    clip's progress bin at each granularity."""

    clip: Array                      # (clip_len, feature_dim)
    next_action: int
    progress_bins: dict[int, int]    # granularity -> bin index
    sequence_id: str
    clip_frame_indices: Array

    def __post_init__(self) -> None:
        self.clip_frame_indices = np.asarray(self.clip_frame_indices, dtype=np.int64)
        if np.any(np.diff(self.clip_frame_indices) <= 0):
            raise ValueError("clip frame indices must be strictly increasing")
        if self.clip_frame_indices.shape[0] != self.clip.shape[0]:
            raise ValueError("clip rows and frame indices disagree")


def collate_samples(
    samples: list[ForecastSample],
    granularities: tuple[int, ...],
) -> tuple[Array, Array, dict[int, Array]]:
    """Stack samples into time-major arrays for the batched forward pass."""
    if not samples:
        raise ValueError("empty batch")
    clips = np.stack([s.clip for s in samples], axis=1)  # (T, B, D)
    targets = np.array([s.next_action for s in samples], dtype=np.int64)
    bins: dict[int, Array] = {}
    for n in granularities:
        try:
            bins[n] = np.array([s.progress_bins[n] for s in samples], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"sample lacks a progress bin for granularity {n}") from exc
    return clips, targets, bins


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class CombinedOutputs:
    fused: Array                    # (B, n_classes)
    stream_heads: dict[str, Array]  # per-stream auxiliary outputs
    stream_feats: dict[str, Array]  # per-stream projection features


@dataclass
class _StreamCache:
    lstm: LstmStackCache
    h_final: Array
    pre: Array
    feat: Array


@dataclass
class CombinedCache:
    stream_caches: dict[str, _StreamCache]
    concat: Array


def forward_combined_batch(
    params: CombinedModelParams,
    clips: Array,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[CombinedOutputs, CombinedCache]:
    """Run all streams over a (T, B, D) clip batch and fuse their features."""
    cfg = params.config
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 3:
        raise ValueError("clips must be (T, B, D)")
    if clips.shape[-1] != cfg.input_dim:
        raise ValueError(
            f"clip feature dim {clips.shape[-1]} does not match model input dim {cfg.input_dim}"
        )
    heads: dict[str, Array] = {}
    feats: dict[str, Array] = {}
    caches: dict[str, _StreamCache] = {}
    for name in cfg.stream_names():
        s = params.streams[name]
        h_final, lstm_cache = lstm_stack_forward(
            s.lstm, clips, dropout_rate=cfg.dropout, train=train, rng=rng
        )
        pre = h_final @ s.proj_w.T + s.proj_b
        feat = relu(pre)
        heads[name] = feat @ s.head_w.T + s.head_b
        feats[name] = feat
        caches[name] = _StreamCache(lstm_cache, h_final, pre, feat)
    concat = np.concatenate([feats[n] for n in cfg.stream_names()], axis=1)
    fused = concat @ params.fusion_w.T + params.fusion_b
    return CombinedOutputs(fused, heads, feats), CombinedCache(caches, concat)


def backward_combined_batch(
    params: CombinedModelParams,
    cache: CombinedCache,
    d_fused: Array,
    d_heads: dict[str, Array],
) -> dict[str, Array]:
    """Exact gradients of a scalar objective given output-side gradients."""
    cfg = params.config
    grads: dict[str, Array] = {}
    grads["fusion/w"] = d_fused.T @ cache.concat
    grads["fusion/b"] = d_fused.sum(axis=0)
    d_concat = d_fused @ params.fusion_w
    p = cfg.proj_dim
    for idx, name in enumerate(cfg.stream_names()):
        s = params.streams[name]
        sc = cache.stream_caches[name]
        d_feat = d_concat[:, idx * p:(idx + 1) * p].copy()
        d_head = d_heads.get(name)
        if d_head is not None:
            grads[f"{name}/head_w"] = d_head.T @ sc.feat
            grads[f"{name}/head_b"] = d_head.sum(axis=0)
            d_feat += d_head @ s.head_w
        else:
            grads[f"{name}/head_w"] = np.zeros_like(s.head_w)
            grads[f"{name}/head_b"] = np.zeros_like(s.head_b)
        d_pre = d_feat * (sc.pre > 0)
        grads[f"{name}/proj_w"] = d_pre.T @ sc.h_final
        grads[f"{name}/proj_b"] = d_pre.sum(axis=0)
        d_h_final = d_pre @ s.proj_w
        layer_grads, _ = lstm_stack_backward(s.lstm, sc.lstm, d_h_final)
        for i, lg in enumerate(layer_grads):
            grads[f"{name}/lstm{i}/w_x"] = lg.w_x
            grads[f"{name}/lstm{i}/w_h"] = lg.w_h
            grads[f"{name}/lstm{i}/b"] = lg.b
    return grads


# ---------------------------------------------------------------------------
# Combined loss
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    fused: float = 1.0
    local: float = 1.0
    progress: float = 1.0
    per_granularity: dict[int, float] = field(default_factory=dict)

    def weight_for(self, granularity: int) -> float:
        return self.per_granularity.get(granularity, self.progress)


def combined_loss_batch(
    config: ModelConfig,
    outputs: CombinedOutputs,
    next_actions: Array,
    progress_bins: dict[int, Array],
    weights: LossWeights | None = None,
) -> tuple[dict[str, float], Array, dict[str, Array]]:
    """Weighted sum of the fused, local, and per-granularity progress losses.

    Returns per-term mean losses (plus "total") and gradients w.r.t. the
    fused logits and each stream head, already scaled by weight / batch.
    """
    weights = weights or LossWeights()
    batch = outputs.fused.shape[0]
    terms: dict[str, float] = {}

    fused_losses, fused_grads = losses.cross_entropy_batch(outputs.fused, next_actions)
    terms["fused_ce"] = float(fused_losses.mean())
    d_fused = fused_grads * (weights.fused / batch)

    d_heads: dict[str, Array] = {}
    local_losses, local_grads = losses.cross_entropy_batch(
        outputs.stream_heads[ACT_STREAM], next_actions
    )
    terms["local_ce"] = float(local_losses.mean())
    d_heads[ACT_STREAM] = local_grads * (weights.local / batch)

    for n in config.granularities:
        name = f"g{n}"
        if n not in progress_bins:
            raise ValueError(f"missing progress target for granularity {n}")
        head = outputs.stream_heads[name]
        w = weights.weight_for(n)
        if config.progress_loss == "cross_entropy":
            pl, pg = losses.cross_entropy_batch(head, progress_bins[n])
        elif config.progress_loss == "cploss":
            pl, pg = losses.cp_loss_batch(head, progress_bins[n])
        else:  # l2 on a scalar progress prediction
            pred = head[:, 0]
            target = progress_bins[n].astype(np.float64)
            diff = target - pred
            pl = diff * diff
            pg = (-2.0 * diff)[:, None]
        terms[f"progress_{n}"] = float(pl.mean())
        d_heads[name] = pg * (w / batch)

    terms["total"] = (
        weights.fused * terms["fused_ce"]
        + weights.local * terms["local_ce"]
        + sum(weights.weight_for(n) * terms[f"progress_{n}"] for n in config.granularities)
    )
    return terms, d_fused, d_heads


def loss_and_grads(
    params: CombinedModelParams,
    clips: Array,
    next_actions: Array,
    progress_bins: dict[int, Array],
    weights: LossWeights | None = None,
    train: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[dict[str, float], dict[str, Array]]:
    """Forward, loss, and exact parameter gradients for one batch."""
    outputs, cache = forward_combined_batch(params, clips, train=train, rng=rng)
    terms, d_fused, d_heads = combined_loss_batch(
        params.config, outputs, next_actions, progress_bins, weights
    )
    grads = backward_combined_batch(params, cache, d_fused, d_heads)
    return terms, grads


def batch_loss(
    params: CombinedModelParams,
    clips: Array,
    next_actions: Array,
    progress_bins: dict[int, Array],
    weights: LossWeights | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Forward-only total loss; the finite-difference side of gradient checks."""
    outputs, _ = forward_combined_batch(params, clips, train=train, rng=rng)
    terms, _, _ = combined_loss_batch(params.config, outputs, next_actions, progress_bins, weights)
    return terms["total"]


# ---------------------------------------------------------------------------
# Single-clip convenience wrappers
# ---------------------------------------------------------------------------

def _forward_single(params: CombinedModelParams, clip: Array) -> CombinedOutputs:
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 2:
        raise ValueError("clip must be (clip_len, feature_dim)")
    outputs, _ = forward_combined_batch(params, clip[:, None, :], train=False)
    return outputs


def forward_local(params: CombinedModelParams, clip: Array) -> tuple[Array, Array]:
    """Action logits and projection feature of the local stream (eval mode)."""
    out = _forward_single(params, clip)
    return out.stream_heads[ACT_STREAM][0], out.stream_feats[ACT_STREAM][0]


def forward_progress(
    params: CombinedModelParams, clip: Array, granularity: int
) -> tuple[Array, Array]:
    """Progress logits and projection feature of one granularity stream."""
    name = f"g{granularity}"
    if name not in params.streams:
        raise ValueError(f"model has no granularity-{granularity} stream")
    out = _forward_single(params, clip)
    return out.stream_heads[name][0], out.stream_feats[name][0]


def forward_combined(
    params: CombinedModelParams, clip: Array
) -> tuple[Array, dict[str, Array]]:
    """Fused action logits plus every stream's auxiliary output (eval mode)."""
    out = _forward_single(params, clip)
    return out.fused[0], {k: v[0] for k, v in out.stream_heads.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ACKP"
_CKPT_VERSION = 1


def save_checkpoint(
    path: Path | str,
    params: CombinedModelParams,
    extra: dict | None = None,
) -> None:
    """Versioned binary container: config echo plus named float64 tensors."""
    meta = {"model": params.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = to_param_dict(params)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path: Path | str) -> tuple[CombinedModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = 4
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (json_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    meta = json.loads(raw[offset:offset + json_len].decode("utf-8"))
    offset += json_len
    (n_tensors,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors: dict[str, Array] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += 8 * count
    config = ModelConfig.from_dict(meta["model"])
    return from_param_dict(config, tensors), meta.get("extra", {})
