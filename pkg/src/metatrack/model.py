"""Linear re-identification head, its losses, and appearance features.

The head maps a fixed-dimension appearance feature to per-identity logits.
Parameters travel as a flat vector (row-major weights, then bias) so the
optimizers in :mod:`metatrack.maml` and :mod:`metatrack.online` can treat
them as a single point in R^P.  Loss builders return graph functions over
that flat vector for use with :mod:`metatrack.numkit.autodiff`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from metatrack.numkit import autodiff as ad
from metatrack.numkit.vecmath import as_vector

__all__ = [
    "HeadParams",
    "LabeledSample",
    "DescriptorScheme",
    "head_forward",
    "task_loss",
    "embed",
    "make_cross_entropy_loss",
    "make_alignment_loss",
    "describe_crop",
    "FeatureStore",
    "write_features",
    "detection_key",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadParams:
    """Weights (C x D) and bias (C) of the linear head."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError("weights must be (C, D) with a length-C bias")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("head parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def flat(self) -> np.ndarray:
        """Row-major weights followed by bias, as one vector."""
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, flat, num_classes: int, feature_dim: int) -> "HeadParams":
        arr = np.asarray(flat, dtype=np.float64)
        expected = num_classes * feature_dim + num_classes
        if arr.shape != (expected,):
            raise ValueError(f"flat parameter vector must have length {expected}")
        w = arr[: num_classes * feature_dim].reshape(num_classes, feature_dim)
        b = arr[num_classes * feature_dim :]
        return cls(w.copy(), b.copy())

    @classmethod
    def initial(cls, num_classes: int, feature_dim: int, rng: np.random.Generator,
                scale: float = 0.01) -> "HeadParams":
        """Small random weights, zero bias."""
        w = rng.normal(0.0, scale, (num_classes, feature_dim))
        return cls(w, np.zeros(num_classes))


@dataclass(frozen=True)
class LabeledSample:
    """One appearance feature with its identity label.

    ``identity`` is the raw ground-truth identity at ingest time; episode
    construction re-maps it densely into [0, C) before training.
    """

    feature: np.ndarray
    identity: int
    frame: int
    sequence: str = ""

    def __post_init__(self):
        object.__setattr__(self, "feature", as_vector(self.feature, "feature"))


def head_forward(params: HeadParams, feature) -> np.ndarray:
    """Per-identity logits W @ x + b."""
    x = as_vector(feature, "feature")
    if x.shape[0] != params.feature_dim:
        raise ValueError(
            f"feature dim {x.shape[0]} != head input dim {params.feature_dim}"
        )
    logits = params.weights @ x + params.bias
    if not np.all(np.isfinite(logits)):
        raise ValueError("head produced non-finite logits")
    return logits


def embed(params: HeadParams, feature) -> np.ndarray:
    """Unit-norm logit vector used for appearance matching."""
    logits = head_forward(params, feature)
    n = float(np.linalg.norm(logits))
    if n == 0.0:
        raise ValueError("embedding is undefined: head produced all-zero logits")
    return logits / n


def task_loss(params: HeadParams, samples: Sequence[LabeledSample]) -> float:
    """Mean softmax cross-entropy over the samples, in their given order."""
    if len(samples) == 0:
        raise ValueError("task loss needs at least one sample")
    c = params.num_classes
    total = 0.0
    for s in samples:
        if not 0 <= s.identity < c:
            raise ValueError(f"label {s.identity} outside [0, {c})")
        logits = head_forward(params, s.feature)
        m = float(np.max(logits))
        lse = m + float(np.log(np.sum(np.exp(logits - m))))
        total += lse - float(logits[s.identity])
    return total / len(samples)


def _unflatten_graph(theta: ad.Node, num_classes: int, feature_dim: int):
    w = ad.reshape(ad.narrow(theta, 0, num_classes * feature_dim), (num_classes, feature_dim))
    b = ad.narrow(theta, num_classes * feature_dim, num_classes)
    return w, b


def make_cross_entropy_loss(samples: Sequence[LabeledSample], num_classes: int,
                            feature_dim: int):
    """Graph builder for the mean cross-entropy of a fixed sample batch.

    Returns ``f(theta: Node) -> Node`` over the flat parameter vector, for
    use with gradient and Hessian-vector-product routines.
    """
    if len(samples) == 0:
        raise ValueError("loss needs at least one sample")
    feats = []
    labels = []
    for s in samples:
        if s.feature.shape[0] != feature_dim:
            raise ValueError("sample feature dim mismatch")
        if not 0 <= s.identity < num_classes:
            raise ValueError(f"label {s.identity} outside [0, {num_classes})")
        feats.append(ad.constant(s.feature))
        labels.append(int(s.identity))
    count = float(len(samples))

    def loss(theta: ad.Node) -> ad.Node:
        w, b = _unflatten_graph(theta, num_classes, feature_dim)
        acc = None
        for x, y in zip(feats, labels):
            logits = ad.add(ad.matvec(w, x), b)
            term = ad.sub(ad.log_sum_exp(logits), ad.pick(logits, y))
            acc = term if acc is None else ad.add(acc, term)
        return ad.div(acc, count)

    return loss


def make_alignment_loss(features: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                        num_classes: int, feature_dim: int):
    """Graph builder for mean (1 - cos(logits, target)) over fixed pairs.

    Targets are constants (unit vectors in logit space), so the loss pulls
    the head toward reproducing them for the paired features.
    """
    if len(features) == 0 or len(features) != len(targets):
        raise ValueError("need equally many features and targets")
    xs = [ad.constant(as_vector(f, "feature")) for f in features]
    ts = []
    for t in targets:
        arr = as_vector(t, "target")
        if arr.shape[0] != num_classes:
            raise ValueError("target must live in logit space")
        n = float(np.linalg.norm(arr))
        if n == 0.0:
            raise ValueError("target has zero norm")
        ts.append(ad.constant(arr / n))
    count = float(len(xs))

    def loss(theta: ad.Node) -> ad.Node:
        w, b = _unflatten_graph(theta, num_classes, feature_dim)
        acc = None
        for x, t in zip(xs, ts):
            logits = ad.add(ad.matvec(w, x), b)
            cos = ad.div(ad.dot(logits, t), ad.norm(logits))
            term = ad.sub(1.0, cos)
            acc = term if acc is None else ad.add(acc, term)
        return ad.div(acc, count)

    return loss


@dataclass(frozen=True)
class DescriptorScheme:
    """Fixed recipe turning an image crop into a feature vector."""

    channels: int = 3
    intensity_bins: int = 8
    orientation_bins: int = 8
    value_range: float = 255.0

    def __post_init__(self):
        if self.channels < 1 or self.intensity_bins < 1 or self.orientation_bins < 1:
            raise ValueError("descriptor scheme sizes must be positive")
        if self.value_range <= 0:
            raise ValueError("value_range must be positive")

    @property
    def dim(self) -> int:
        return self.channels * self.intensity_bins + self.orientation_bins


def describe_crop(crop, scheme: DescriptorScheme | None = None) -> np.ndarray:
    """Per-channel intensity histograms plus a gradient-orientation histogram.

    Accepts an (H, W) or (H, W, channels) array.  A single-channel crop is
    replicated across the scheme's channels so the output dimension is fixed
    by the scheme alone.  Histogram blocks are mass-normalized.
    """
    scheme = scheme or DescriptorScheme()
    img = np.asarray(crop, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], scheme.channels, axis=2)
    if img.ndim != 3 or img.shape[2] != scheme.channels:
        raise ValueError(f"crop must be (H, W) or (H, W, {scheme.channels})")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("crop must contain at least one pixel")
    if not np.all(np.isfinite(img)):
        raise ValueError("crop contains non-finite values")

    pixels = img.shape[0] * img.shape[1]
    blocks = []
    for c in range(scheme.channels):
        hist, _ = np.histogram(
            img[:, :, c], bins=scheme.intensity_bins, range=(0.0, scheme.value_range)
        )
        blocks.append(hist / pixels)

    gray = img.mean(axis=2)
    if gray.shape[0] >= 2 and gray.shape[1] >= 2:
        gy, gx = np.gradient(gray)
    else:
        gy = np.zeros_like(gray)
        gx = np.zeros_like(gray)
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)  # orientation, not direction
    ohist, _ = np.histogram(
        angle, bins=scheme.orientation_bins, range=(0.0, np.pi), weights=mag
    )
    mass = float(ohist.sum())
    blocks.append(ohist / mass if mass > 0 else np.zeros(scheme.orientation_bins))
    return np.concatenate(blocks)


# Feature files carry one vector per row after a '#dim D' header line:
#   sequence,frame,identity,x1,...,xD
# Rows with identity >= 0 are keyed by ground-truth identity; rows with
# identity = -2 - k are keyed by detection ordinal k within the frame, so a
# single file can serve both training and tracking.
_DETECTION_BASE = -2


def detection_key(ordinal: int) -> int:
    """Identity field encoding the k-th detection of a frame (k >= 0)."""
    if ordinal < 0:
        raise ValueError("detection ordinal must be non-negative")
    return _DETECTION_BASE - ordinal


@dataclass
class FeatureStore:
    """In-memory map from (sequence, frame, identity) to a feature vector."""

    dim: int
    _table: dict[tuple[str, int, int], np.ndarray] = field(default_factory=dict)

    def put(self, sequence: str, frame: int, identity: int, feature) -> None:
        vec = as_vector(feature, "feature")
        if vec.shape[0] != self.dim:
            raise ValueError(f"feature dim {vec.shape[0]} != store dim {self.dim}")
        self._table[(sequence, int(frame), int(identity))] = vec

    def get(self, sequence: str, frame: int, identity: int) -> np.ndarray:
        key = (sequence, int(frame), int(identity))
        if key not in self._table:
            raise KeyError(f"no feature for sequence={sequence!r} frame={frame} "
                           f"identity={identity}")
        return self._table[key]

    def get_detection(self, sequence: str, frame: int, ordinal: int) -> np.ndarray:
        return self.get(sequence, frame, detection_key(ordinal))

    def __contains__(self, key: tuple[str, int, int]) -> bool:
        return (key[0], int(key[1]), int(key[2])) in self._table

    def __len__(self) -> int:
        return len(self._table)

    def items(self):
        return self._table.items()

    @classmethod
    def load(cls, path) -> "FeatureStore":
        """Parse a feature file; malformed rows raise with a line number."""
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("#dim"):
            raise ValueError(f"{path}: missing '#dim D' header")
        try:
            dim = int(lines[0].split()[1])
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}: malformed '#dim' header") from exc
        if dim < 1:
            raise ValueError(f"{path}: feature dimension must be positive")
        store = cls(dim)
        for lineno, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3 + dim:
                raise ValueError(f"{path}:{lineno}: expected {3 + dim} fields, "
                                 f"got {len(parts)}")
            try:
                sequence = parts[0]
                frame = int(parts[1])
                identity = int(parts[2])
                vec = np.array([float(p) for p in parts[3:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row") from exc
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{path}:{lineno}: non-finite feature")
            store._table[(sequence, frame, identity)] = vec
        return store


def write_features(path, dim: int,
                   records: Iterable[tuple[str, int, int, np.ndarray]]) -> None:
    """Write a feature file; floats use repr so reloads are bit-exact."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"#dim {dim}\n")
        for sequence, frame, identity, feature in records:
            vec = np.asarray(feature, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError("record dimension mismatch")
            values = ",".join(repr(float(v)) for v in vec)
            fh.write(f"{sequence},{int(frame)},{int(identity)},{values}\n")
