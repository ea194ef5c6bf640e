"""Synthetic task grammars and the feature generator built on them.

A grammar is a partially ordered set of action instances; sampling a
sequence means drawing a linear extension of that partial order (repeatedly
picking uniformly among the currently enabled instances), drawing a duration
per instance, optionally inserting null gaps between actions, and emitting
per-frame features as noisy class means blended by a centered moving
average.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledSequence

Array = np.ndarray

log = logging.getLogger(__name__)


class GrammarError(ValueError):
    """The grammar definition is inconsistent (cycles, bad references, ...)."""


@dataclass
class TaskGrammar:
    """Partially ordered action template with per-class duration ranges.

    ``instances`` are occurrence ids (e.g. two "pick" occurrences are two
    instances of the same class); ``precedence`` pairs (before, after) refer
    to instance ids. ``interleavable_groups`` document sets of instances with
    no mutual ordering; validation rejects precedence pairs inside a group.
    """

    class_names: list[str]
    instances: list[str]
    instance_class: dict[str, str]
    precedence: set[tuple[str, str]]
    duration_range: dict[str, tuple[int, int]]  # per class: (min_frames, max_frames)
    interleavable_groups: list[set[str]] = field(default_factory=list)
    null_class: str | None = None
    null_gap_range: tuple[int, int] = (2, 4)
    null_gap_prob: float = 0.0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def repetitions(self) -> dict[str, int]:
        """Instance counts per action class."""
        return dict(Counter(self.instance_class[i] for i in self.instances))

    def class_id(self, name: str) -> int:
        return self.class_names.index(name)

    @property
    def null_class_ids(self) -> list[int]:
        return [self.class_id(self.null_class)] if self.null_class else []

    def validate(self) -> None:
        if not self.class_names:
            raise GrammarError("grammar needs at least one action class")
        if len(set(self.class_names)) != len(self.class_names):
            raise GrammarError("duplicate class names")
        if len(set(self.instances)) != len(self.instances):
            raise GrammarError("duplicate instance ids")
        for inst in self.instances:
            cls = self.instance_class.get(inst)
            if cls is None:
                raise GrammarError(f"instance '{inst}' has no class")
            if cls not in self.class_names:
                raise GrammarError(f"instance '{inst}' uses unknown class '{cls}'")
            rng_ = self.duration_range.get(cls)
            if rng_ is None:
                raise GrammarError(f"class '{cls}' has no duration range")
            lo, hi = rng_
            if not 1 <= lo <= hi:
                raise GrammarError(f"class '{cls}' has invalid duration range {rng_}")
        known = set(self.instances)
        for before, after in self.precedence:
            if before not in known or after not in known:
                raise GrammarError(f"precedence ({before}, {after}) references unknown instance")
        if self.null_class is not None and self.null_class not in self.class_names:
            raise GrammarError(f"null class '{self.null_class}' not in class list")
        for group in self.interleavable_groups:
            for member in group:
                if member not in known:
                    raise GrammarError(f"interleavable group references unknown instance '{member}'")
            for a, b in self.precedence:
                if a in group and b in group:
                    raise GrammarError(
                        f"precedence ({a}, {b}) inside interleavable group"
                    )
        # Kahn's algorithm: a cycle leaves instances unplaced.
        placed = self._topological_order()
        if len(placed) != len(self.instances):
            stuck = sorted(known - set(placed))
            raise GrammarError(f"cyclic precedence; unreachable instances: {stuck}")

    def _topological_order(self) -> list[str]:
        preds = {i: set() for i in self.instances}
        for before, after in self.precedence:
            preds[after].add(before)
        placed: list[str] = []
        done: set[str] = set()
        remaining = list(self.instances)
        while remaining:
            ready = [i for i in remaining if preds[i] <= done]
            if not ready:
                break
            placed.extend(ready)
            done.update(ready)
            remaining = [i for i in remaining if i not in done]
        return placed

    # -- JSON round trip ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "instances": list(self.instances),
            "instance_class": dict(self.instance_class),
            "precedence": sorted(list(p) for p in self.precedence),
            "duration_range": {k: list(v) for k, v in self.duration_range.items()},
            "interleavable_groups": [sorted(g) for g in self.interleavable_groups],
            "null_class": self.null_class,
            "null_gap_range": list(self.null_gap_range),
            "null_gap_prob": self.null_gap_prob,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "TaskGrammar":
        return cls(
            class_names=list(blob["class_names"]),
            instances=list(blob["instances"]),
            instance_class=dict(blob["instance_class"]),
            precedence={tuple(p) for p in blob.get("precedence", [])},
            duration_range={k: tuple(v) for k, v in blob["duration_range"].items()},
            interleavable_groups=[set(g) for g in blob.get("interleavable_groups", [])],
            null_class=blob.get("null_class"),
            null_gap_range=tuple(blob.get("null_gap_range", (2, 4))),
            null_gap_prob=float(blob.get("null_gap_prob", 0.0)),
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "TaskGrammar":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class OrderedAction:
    instance: str
    action: str
    class_id: int
    duration: int


def generate_action_order(grammar: TaskGrammar, rng: np.random.Generator) -> list[OrderedAction]:
    """Sample one valid linear extension of the grammar with durations.

    Repeatedly picks uniformly among the currently enabled instances (all
    predecessors already emitted); durations are uniform over each class's
    range. Exact uniformity over all linear extensions is not attempted.
    """
    preds: dict[str, set[str]] = {i: set() for i in grammar.instances}
    for before, after in grammar.precedence:
        preds[after].add(before)
    done: set[str] = set()
    remaining = list(grammar.instances)
    order: list[OrderedAction] = []
    while remaining:
        ready = [i for i in remaining if preds[i] <= done]
        if not ready:
            raise GrammarError("no enabled instance; grammar validation should have caught this")
        chosen = ready[int(rng.integers(len(ready)))]
        cls = grammar.instance_class[chosen]
        lo, hi = grammar.duration_range[cls]
        duration = int(rng.integers(lo, hi + 1))
        order.append(OrderedAction(chosen, cls, grammar.class_id(cls), duration))
        done.add(chosen)
        remaining.remove(chosen)
    return order


def verify_order(order: list[OrderedAction], grammar: TaskGrammar) -> bool:
    """Independent brute-force check that every precedence pair is satisfied."""
    position = {a.instance: idx for idx, a in enumerate(order) if a.instance in grammar.instance_class}
    for before, after in grammar.precedence:
        if position[before] >= position[after]:
            return False
    return True


def insert_null_gaps(
    order: list[OrderedAction],
    grammar: TaskGrammar,
    rng: np.random.Generator,
) -> list[OrderedAction]:
    """Insert short null-class segments between consecutive actions."""
    if grammar.null_class is None or grammar.null_gap_prob <= 0.0:
        return list(order)
    null_id = grammar.class_id(grammar.null_class)
    lo, hi = grammar.null_gap_range
    out: list[OrderedAction] = []
    for idx, act in enumerate(order):
        out.append(act)
        if idx < len(order) - 1 and rng.random() < grammar.null_gap_prob:
            duration = int(rng.integers(lo, hi + 1))
            out.append(OrderedAction(f"null_{idx}", grammar.null_class, null_id, duration))
    return out


# ---------------------------------------------------------------------------
# Feature emission
# ---------------------------------------------------------------------------

@dataclass
class FeatureModel:
    """Per-class feature prototypes plus frame noise and temporal blending."""

    class_means: Array  # (n_classes, feature_dim)
    noise_std: float = 0.5
    smoothing_window: int = 5

    def __post_init__(self) -> None:
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if self.class_means.ndim != 2 or self.class_means.shape[1] < 1:
            raise ValueError("class_means must be (n_classes, feature_dim)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")
        n = self.class_means.shape[0]
        for a in range(n):
            for b in range(a + 1, n):
                if np.array_equal(self.class_means[a], self.class_means[b]):
                    raise ValueError(f"class means {a} and {b} are identical")

    @property
    def feature_dim(self) -> int:
        return self.class_means.shape[1]

    @classmethod
    def random(
        cls,
        n_classes: int,
        feature_dim: int,
        rng: np.random.Generator,
        noise_std: float = 0.5,
        smoothing_window: int = 5,
    ) -> "FeatureModel":
        """Well-separated unit-norm random prototypes, one per class."""
        means = rng.standard_normal((n_classes, feature_dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        return cls(means, noise_std, smoothing_window)


def moving_average(x: Array, window: int) -> Array:
    """Centered moving average along axis 0, truncated at the edges."""
    if window <= 1:
        return np.array(x, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    cs = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)], axis=0)
    idx = np.arange(n)
    lo = np.clip(idx - (window - 1) // 2, 0, n)
    hi = np.clip(idx + window // 2 + 1, 0, n)
    counts = (hi - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return (cs[hi] - cs[lo]) / counts


def emit_features(
    order: list[OrderedAction],
    fm: FeatureModel,
    rng: np.random.Generator,
    source_id: str = "synthetic",
) -> LabeledSequence:
    """Render an action order into per-frame features and labels.

    Each frame draws its class prototype plus isotropic gaussian noise; a
    centered moving average then blends neighboring frames for temporal
    coherence. Features are quantized to float32 precision so that saving
    to the float32 file format and loading back is bit-exact.
    """
    if not order:
        raise ValueError("action order is empty")
    labels = np.concatenate([np.full(a.duration, a.class_id, dtype=np.int64) for a in order])
    if labels.max() >= fm.class_means.shape[0]:
        raise ValueError("feature model has no prototype for some class id")
    feats = fm.class_means[labels]
    if fm.noise_std > 0:
        feats = feats + rng.normal(0.0, fm.noise_std, size=feats.shape)
    feats = moving_average(feats, fm.smoothing_window)
    feats = feats.astype(np.float32).astype(np.float64)
    return LabeledSequence(feats, labels, source_id)


def generate_sequence(
    grammar: TaskGrammar,
    fm: FeatureModel,
    rng: np.random.Generator,
    source_id: str,
    null_gaps: bool = True,
) -> LabeledSequence:
    order = generate_action_order(grammar, rng)
    if null_gaps:
        order = insert_null_gaps(order, grammar, rng)
    return emit_features(order, fm, rng, source_id)


def generate_dataset(
    grammar: TaskGrammar,
    fm: FeatureModel,
    n_sequences: int,
    master_seed: int,
    id_prefix: str = "seq",
    start_index: int = 0,
    null_gaps: bool = True,
) -> list[LabeledSequence]:
    """Generate sequences on independent per-sequence RNG streams.

    Stream k uses ``default_rng((master_seed, start_index + k + 1))``; the
    feature model conventionally owns stream 0 (see ``default_feature_model``).
    """
    out = []
    for k in range(n_sequences):
        idx = start_index + k
        rng = np.random.default_rng((master_seed, idx + 1))
        out.append(generate_sequence(grammar, fm, rng, f"{id_prefix}_{idx:03d}", null_gaps))
    return out


# ---------------------------------------------------------------------------
# Default grammar: four-leg table assembly then disassembly
# ---------------------------------------------------------------------------

IKEA_CLASS_NAMES = [
    "pick_leg",
    "attach_leg_1",
    "attach_leg_2",
    "attach_leg_3",
    "attach_leg_4",
    "spin_in",
    "flip_table",
    "spin_out",
    "detach_leg_1",
    "detach_leg_2",
    "detach_leg_3",
    "detach_leg_4",
    "null",
]


def default_ikea_grammar(null_gap_prob: float = 0.35) -> TaskGrammar:
    """Assembly-then-disassembly template over 13 classes (null included).

    Structure: position the tabletop (flip), then per leg pick -> attach ->
    spin in, legs attached in fixed order but picks free to happen any time
    after the first flip; flip again; then spin out / detach legs in reverse
    order. Picks share one class and spins share one class per direction, so
    durations are heavily imbalanced (long spins, short picks) and a clip
    inside a spin does not reveal which leg it belongs to.
    """
    instances = ["flip_start"]
    instance_class = {"flip_start": "flip_table"}
    precedence: set[tuple[str, str]] = set()

    for k in range(1, 5):
        pick, attach, spin = f"pick_{k}", f"attach_{k}", f"spin_in_{k}"
        instances += [pick, attach, spin]
        instance_class[pick] = "pick_leg"
        instance_class[attach] = f"attach_leg_{k}"
        instance_class[spin] = "spin_in"
        precedence.add(("flip_start", pick))
        precedence.add((pick, attach))
        precedence.add((attach, spin))
        if k > 1:
            precedence.add((f"spin_in_{k - 1}", attach))

    instances.append("flip_mid")
    instance_class["flip_mid"] = "flip_table"
    precedence.add(("spin_in_4", "flip_mid"))

    prev = "flip_mid"
    for k in range(4, 0, -1):
        spin, detach = f"spin_out_{k}", f"detach_{k}"
        instances += [spin, detach]
        instance_class[spin] = "spin_out"
        instance_class[detach] = f"detach_leg_{k}"
        precedence.add((prev, spin))
        precedence.add((spin, detach))
        prev = detach

    duration_range = {
        "pick_leg": (3, 6),
        "attach_leg_1": (7, 12),
        "attach_leg_2": (7, 12),
        "attach_leg_3": (7, 12),
        "attach_leg_4": (7, 12),
        "spin_in": (30, 42),
        "flip_table": (5, 9),
        "spin_out": (30, 42),
        "detach_leg_1": (7, 12),
        "detach_leg_2": (7, 12),
        "detach_leg_3": (7, 12),
        "detach_leg_4": (7, 12),
        "null": (2, 4),
    }

    return TaskGrammar(
        class_names=list(IKEA_CLASS_NAMES),
        instances=instances,
        instance_class=instance_class,
        precedence=precedence,
        duration_range=duration_range,
        interleavable_groups=[{f"pick_{k}" for k in range(1, 5)}],
        null_class="null",
        null_gap_prob=null_gap_prob,
    )


def default_feature_model(
    feature_dim: int,
    seed: int,
    noise_std: float = 0.5,
    smoothing_window: int = 5,
    leg_offset: float = 0.4,
) -> FeatureModel:
    """Structured prototypes for the default grammar.

    Action families (pick, attach, spins, flip, detach, null) get
    well-separated directions, but the four attach classes share one family
    direction plus a small per-leg offset, and likewise for detach. Telling
    which leg is being handled therefore needs evidence pooled over several
    frames instead of a single glance.
    """
    rng = np.random.default_rng((seed, 0))
    names = IKEA_CLASS_NAMES

    def unit(v: Array) -> Array:
        return v / np.linalg.norm(v)

    families = ["pick_leg", "attach", "spin_in", "flip_table", "spin_out", "detach", "null"]
    base = {f: unit(rng.standard_normal(feature_dim)) for f in families}
    means = np.zeros((len(names), feature_dim))
    for idx, name in enumerate(names):
        if name.startswith("attach_leg_"):
            means[idx] = unit(base["attach"] + leg_offset * unit(rng.standard_normal(feature_dim)))
        elif name.startswith("detach_leg_"):
            means[idx] = unit(base["detach"] + leg_offset * unit(rng.standard_normal(feature_dim)))
        else:
            means[idx] = base[name]
    return FeatureModel(means, noise_std=noise_std, smoothing_window=smoothing_window)


BUILTIN_GRAMMARS = {
    "ikea-default": default_ikea_grammar,
}


def resolve_grammar(spec: str) -> TaskGrammar:
    """A builtin grammar name, or a path to a grammar JSON file."""
    if spec in BUILTIN_GRAMMARS:
        return BUILTIN_GRAMMARS[spec]()
    path = Path(spec)
    if path.exists():
        return TaskGrammar.load(path)
    raise GrammarError(
        f"unknown grammar '{spec}' (builtins: {sorted(BUILTIN_GRAMMARS)})"
    )
