"""Per-frame feature datasets: containers, binary file formats, manifests.

Feature files are raw little-endian float32 row-major matrices with an
8-byte header (two u32: rows, cols). Label files hold one ASCII integer per
line. A JSON manifest lists the file pairs plus class metadata. The fixed
binary layout keeps save/load round trips bit-exact and language neutral.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Array = np.ndarray

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<II")


class DataFormatError(ValueError):
    """A dataset file or manifest does not match the expected layout."""


@dataclass
class LabeledSequence:
    """One full task execution: per-frame feature rows plus per-frame labels."""

    features: Array  # (n_frames, feature_dim) float64
    labels: Array    # (n_frames,) int64
    source_id: str

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d (frames x dim) array")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"sequence '{self.source_id}': {self.features.shape[0]} feature rows "
                f"but {self.labels.shape[0]} labels"
            )

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def distinct_classes(self) -> int:
        return int(np.unique(self.labels).size)


def strip_null_frames(seq: LabeledSequence, null_class_ids: set[int]) -> LabeledSequence:
    """Delete frames whose label is a null class, features and labels in lockstep."""
    if not null_class_ids:
        return seq
    keep = ~np.isin(seq.labels, sorted(null_class_ids))
    return LabeledSequence(seq.features[keep], seq.labels[keep], seq.source_id)


# ---------------------------------------------------------------------------
# File codecs
# ---------------------------------------------------------------------------

def write_feature_file(path: Path | str, features: Array) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be 2-d")
    rows, cols = features.shape
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(rows, cols))
        fh.write(payload)


def read_feature_file(path: Path | str) -> Array:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    rows, cols = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: header says {rows}x{cols} ({expected} bytes) but file has {len(raw)} bytes"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(rows, cols).astype(np.float64)


def write_label_file(path: Path | str, labels: Array) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    with open(path, "w", encoding="ascii") as fh:
        for value in labels:
            fh.write(f"{int(value)}\n")


def read_label_file(path: Path | str) -> Array:
    lines = [ln for ln in Path(path).read_text(encoding="ascii").splitlines() if ln.strip()]
    try:
        return np.array([int(ln) for ln in lines], dtype=np.int64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-integer label line ({exc})") from exc


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    sequence_id: str
    feature_file: str
    label_file: str
    split: str = "train"


@dataclass
class DatasetManifest:
    feature_dim: int
    class_names: list[str]
    null_class_ids: list[int]
    entries: list[ManifestEntry] = field(default_factory=list)
    format_version: int = 1
    root: Path | None = None  # directory the manifest was loaded from / saved to

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "feature_dim": self.feature_dim,
            "class_names": list(self.class_names),
            "null_class_ids": list(self.null_class_ids),
            "sequences": [
                {
                    "id": e.sequence_id,
                    "features": e.feature_file,
                    "labels": e.label_file,
                    "split": e.split,
                }
                for e in self.entries
            ],
        }

    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        self.root = directory
        return path

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            blob = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"cannot read manifest {path}: {exc}") from exc
        entries = [
            ManifestEntry(
                sequence_id=item["id"],
                feature_file=item["features"],
                label_file=item["labels"],
                split=item.get("split", "train"),
            )
            for item in blob.get("sequences", [])
        ]
        return cls(
            feature_dim=int(blob["feature_dim"]),
            class_names=list(blob["class_names"]),
            null_class_ids=[int(i) for i in blob.get("null_class_ids", [])],
            entries=entries,
            format_version=int(blob.get("format_version", 1)),
            root=path.parent,
        )


def save_dataset(
    sequences: list[LabeledSequence],
    directory: Path | str,
    *,
    class_names: list[str],
    null_class_ids: list[int] | tuple[int, ...] = (),
    splits: dict[str, str] | None = None,
) -> DatasetManifest:
    """Write feature/label files for every sequence plus a manifest.

    ``splits`` optionally maps sequence ids to "train"/"test".
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feature_dim = sequences[0].feature_dim if sequences else 0
    entries = []
    for seq in sequences:
        feat_name = f"{seq.source_id}.features"
        label_name = f"{seq.source_id}.labels"
        try:
            write_feature_file(directory / feat_name, seq.features)
            write_label_file(directory / label_name, seq.labels)
        except OSError as exc:
            raise DataFormatError(f"cannot write sequence '{seq.source_id}': {exc}") from exc
        entries.append(
            ManifestEntry(
                sequence_id=seq.source_id,
                feature_file=feat_name,
                label_file=label_name,
                split=(splits or {}).get(seq.source_id, "train"),
            )
        )
    manifest = DatasetManifest(
        feature_dim=feature_dim,
        class_names=list(class_names),
        null_class_ids=list(null_class_ids),
        entries=entries,
    )
    manifest.save(directory)
    return manifest


@dataclass
class LoadedDataset:
    """Sequences after null removal, with labels remapped to contiguous ids.

    Null classes are deleted on load; the remaining class ids are compacted
    so classifier heads can be sized ``len(class_names)`` directly.
    ``label_map[old_id] == new_id`` (or -1 for removed classes).
    """

    sequences: list[LabeledSequence]
    class_names: list[str]
    label_map: dict[int, int]
    split_of: dict[str, str]
    manifest: DatasetManifest

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        return self.manifest.feature_dim

    def split(self, name: str) -> list[LabeledSequence]:
        return [s for s in self.sequences if self.split_of.get(s.source_id) == name]


def load_dataset(
    manifest: DatasetManifest | Path | str,
    *,
    strip_nulls: bool = True,
) -> LoadedDataset:
    """Load every sequence in a manifest, dropping null-class frames.

    Sequences left with fewer than two distinct action classes are rejected
    with a warning. Shape disagreements between a feature file and its label
    file raise a :class:`DataFormatError` naming the sequence.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    root = manifest.root or Path(".")
    null_ids = set(manifest.null_class_ids) if strip_nulls else set()

    kept_ids = [i for i in range(len(manifest.class_names)) if i not in null_ids]
    label_map = {old: new for new, old in enumerate(kept_ids)}
    class_names = [manifest.class_names[i] for i in kept_ids]

    sequences: list[LabeledSequence] = []
    split_of: dict[str, str] = {}
    for entry in manifest.entries:
        features = read_feature_file(root / entry.feature_file)
        labels = read_label_file(root / entry.label_file)
        if features.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"sequence '{entry.sequence_id}': {features.shape[0]} feature rows "
                f"but {labels.shape[0]} label lines"
            )
        if features.shape[1] != manifest.feature_dim:
            raise DataFormatError(
                f"sequence '{entry.sequence_id}': feature dim {features.shape[1]} "
                f"does not match manifest dim {manifest.feature_dim}"
            )
        seq = LabeledSequence(features, labels, entry.sequence_id)
        if null_ids:
            seq = strip_null_frames(seq, null_ids)
            remapped = np.array(
                [label_map.get(int(v), -1) for v in seq.labels], dtype=np.int64
            )
            if np.any(remapped < 0):
                raise DataFormatError(
                    f"sequence '{entry.sequence_id}': label outside class list"
                )
            seq = LabeledSequence(seq.features, remapped, seq.source_id)
        if seq.n_frames < 2 or seq.distinct_classes() < 2:
            log.warning(
                "sequence '%s' rejected: fewer than 2 distinct actions after null removal",
                entry.sequence_id,
            )
            continue
        sequences.append(seq)
        split_of[entry.sequence_id] = entry.split
    return LoadedDataset(sequences, class_names, label_map, split_of, manifest)


# ---------------------------------------------------------------------------
# Optional per-dimension standardization
# ---------------------------------------------------------------------------

def compute_feature_stats(sequences: list[LabeledSequence]) -> tuple[Array, Array]:
    """Per-dimension mean and std over all frames of the given sequences."""
    stacked = np.concatenate([s.features for s in sequences], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return mean, np.maximum(std, 1e-8)


def apply_feature_stats(
    sequences: list[LabeledSequence], mean: Array, std: Array
) -> list[LabeledSequence]:
    return [
        LabeledSequence((s.features - mean) / std, s.labels, s.source_id)
        for s in sequences
    ]
