"""Synthetic source/target domain pairs and their binary file format."""

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import (
    ConfigError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from .rng import make_rng

DATASET_MAGIC = b"PVDALAB1"
_HEADER = struct.Struct("<8s6I")
FLAG_LABELS = 1
FLAG_TARGET = 2

# stream tags for make_rng
_PROTOTYPES, _SHIFT, _SOURCE, _TARGET = 0, 1, 2, 3


@dataclass
class DomainPairSpec:
    num_source_classes: int = 10
    num_target_classes: int = 5
    frames_per_sample: int = 4
    modalities: int = 2
    feature_dim: int = 8
    samples_per_source_class: int = 40
    target_class_counts: list = field(default_factory=lambda: [40] * 5)
    shift_magnitude: float = 1.0
    shift_anisotropy: float = 0.0
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self):
        for name in (
            "num_source_classes",
            "num_target_classes",
            "frames_per_sample",
            "modalities",
            "feature_dim",
            "samples_per_source_class",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", name)
        if self.num_target_classes >= self.num_source_classes:
            raise ConfigError(
                "num_target_classes must be smaller than num_source_classes "
                f"({self.num_target_classes} >= {self.num_source_classes})",
                "num_target_classes",
            )
        counts = list(self.target_class_counts)
        if len(counts) != self.num_target_classes:
            raise ConfigError(
                f"target_class_counts has {len(counts)} entries, expected {self.num_target_classes}",
                "target_class_counts",
            )
        if any(int(c) != c or c < 1 for c in counts):
            raise ConfigError("target_class_counts entries must be positive integers", "target_class_counts")
        if not self.shift_magnitude >= 0:
            raise ConfigError("shift_magnitude must be nonnegative", "shift_magnitude")
        if not self.shift_anisotropy >= 0:
            raise ConfigError("shift_anisotropy must be nonnegative", "shift_anisotropy")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive", "noise_sigma")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(f"unknown data field {name!r}", name)
        return cls(**d)


@dataclass(eq=False)
class Dataset:
    """A stack of feature clips.

    ``features`` has shape ``(num_samples, N, M, d)``; each row is one
    clip.  Target datasets keep their labels, but only evaluation code is
    supposed to look at them.
    """

    features: np.ndarray
    labels: np.ndarray | None
    domain: str
    num_source_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 4:
            raise ValueError(f"features must be 4-d (n, N, M, d), got shape {self.features.shape}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.features),):
                raise ValueError("labels must have one entry per sample")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_source_classes):
                raise ValueError("label outside the source label space")

    def __len__(self):
        return len(self.features)

    @property
    def clip_shape(self):
        return self.features.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.domain, self.num_source_classes) != (other.domain, other.num_source_classes):
            return False
        if self.features.shape != other.features.shape:
            return False
        if self.features.tobytes() != other.features.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


def _prototypes(spec):
    shape = (spec.num_source_classes, spec.frames_per_sample, spec.modalities, spec.feature_dim)
    protos = make_rng(spec.seed, _PROTOTYPES).standard_normal(shape)
    directions = make_rng(spec.seed, _SHIFT).standard_normal(shape)
    norms = np.sqrt((directions**2).sum(axis=(1, 2, 3), keepdims=True))
    shifted = protos + spec.shift_magnitude * directions / norms
    return protos, shifted


def generate_domain_pair(spec):
    """Draw a labeled source set and a partially-overlapping target set.

    Every class owns a prototype clip.  Source samples are the prototype
    plus isotropic noise; target samples use the prototype translated by
    ``shift_magnitude`` along a random unit direction (one per class), and
    modality ``m`` (1-based) has its noise variance scaled by
    ``1 + shift_anisotropy * (m - 1)``.  Only the first
    ``num_target_classes`` classes appear in the target set.
    """
    spec.validate()
    protos, shifted = _prototypes(spec)
    per_sample = protos.shape[1:]

    src_labels = np.repeat(np.arange(spec.num_source_classes), spec.samples_per_source_class)
    noise = make_rng(spec.seed, _SOURCE).standard_normal((len(src_labels),) + per_sample)
    src = protos[src_labels] + spec.noise_sigma * noise

    counts = [int(c) for c in spec.target_class_counts]
    tgt_labels = np.repeat(np.arange(spec.num_target_classes), counts)
    scale = np.sqrt(1.0 + spec.shift_anisotropy * np.arange(spec.modalities))
    noise = make_rng(spec.seed, _TARGET).standard_normal((len(tgt_labels),) + per_sample)
    tgt = shifted[tgt_labels] + spec.noise_sigma * noise * scale[None, None, :, None]

    source = Dataset(src.astype(np.float32), src_labels, "source", spec.num_source_classes)
    target = Dataset(tgt.astype(np.float32), tgt_labels, "target", spec.num_source_classes)
    return source, target


def prototype_shift_distance(spec):
    """Mean distance between source and target prototypes of shared classes."""
    protos, shifted = _prototypes(spec)
    k = spec.num_target_classes
    diff = (shifted[:k] - protos[:k]).reshape(k, -1)
    return float(np.sqrt((diff**2).sum(axis=1)).mean())


def true_label_distribution(target, num_source_classes):
    if target.labels is None or len(target.labels) == 0:
        raise ValueError("target dataset has no labels to count")
    counts = np.bincount(target.labels, minlength=num_source_classes).astype(np.float64)
    return counts / counts.sum()


def save_dataset(path, dataset):
    n, N, M, d = dataset.features.shape
    flags = (FLAG_LABELS if dataset.labels is not None else 0) | (
        FLAG_TARGET if dataset.domain == "target" else 0
    )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, n, N, M, d, dataset.num_source_classes, flags))
        if dataset.labels is not None:
            fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.features.astype("<f4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        if not DATASET_MAGIC.startswith(blob[:8]):
            raise MalformedHeaderError(f"{path}: not a dataset file (bad magic)")
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    magic, n, N, M, d, num_classes, flags = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise MalformedHeaderError(f"{path}: not a dataset file (bad magic {magic!r})")
    if min(N, M, d, num_classes) == 0 or flags & ~(FLAG_LABELS | FLAG_TARGET):
        raise MalformedHeaderError(f"{path}: impossible header values")

    offset = _HEADER.size
    labels_size = 4 * n if flags & FLAG_LABELS else 0
    feats_size = 4 * n * N * M * d
    expected = offset + labels_size + feats_size
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {n} samples ({expected} bytes) but file has {len(blob)} bytes"
        )
    if len(blob) > expected:
        raise ShapeMismatchError(f"{path}: {len(blob) - expected} trailing bytes beyond the declared shape")

    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(blob, "<u4", n, offset).astype(np.int64)
        offset += labels_size
        if n and labels.max() >= num_classes:
            raise MalformedHeaderError(f"{path}: label {labels.max()} outside {num_classes} classes")
    feats = np.frombuffer(blob, "<f4", n * N * M * d, offset).reshape(n, N, M, d).astype(np.float32)
    domain = "target" if flags & FLAG_TARGET else "source"
    return Dataset(feats, labels, domain, num_classes)
