"""Episodic task construction from tracking ground truth.

A task covers one or more identities from a single sequence: the support set
holds each identity's earliest k appearance features and the query set the
next q, so adaptation is always evaluated on frames the inner step never
saw.  Identity labels are re-mapped densely into [0, C) across the whole
distribution, with C shared by every task.

File formats follow the usual delimited tracking layout: ground truth rows
are ``frame,id,left,top,width,height,conf,class,visibility`` and detection
rows are ``frame,-1,left,top,width,height,conf,-1,-1,-1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from metatrack.model import FeatureStore, LabeledSample

__all__ = [
    "GtBox",
    "DetBox",
    "ResultRow",
    "EpisodeTask",
    "TaskDistribution",
    "EmptyTaskSetError",
    "parse_ground_truth",
    "parse_detections",
    "parse_results",
    "write_ground_truth",
    "write_detections",
    "ingest_ground_truth",
    "build_tasks",
    "sample_batch",
]

log = logging.getLogger(__name__)

PEDESTRIAN_CLASS = 1


class EmptyTaskSetError(ValueError):
    """No identity has enough samples to form a single task."""


@dataclass(frozen=True)
class GtBox:
    frame: int
    identity: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0
    category: int = PEDESTRIAN_CLASS
    visibility: float = 1.0


@dataclass(frozen=True)
class DetBox:
    frame: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0


@dataclass(frozen=True)
class ResultRow:
    """One tracker output box: a detection that carries a track identity."""

    frame: int
    identity: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0


@dataclass(frozen=True)
class EpisodeTask:
    """Support/query split for a group of identities from one sequence.

    Sample ``identity`` fields hold dense labels in [0, C); ``identities``
    lists the raw ground-truth ids the task covers, in label order.
    """

    task_id: int
    sequence: str
    identities: tuple[int, ...]
    support: tuple[LabeledSample, ...]
    query: tuple[LabeledSample, ...]


@dataclass
class TaskDistribution:
    """Every task built from one ingest, plus the shared label space."""

    tasks: list[EpisodeTask]
    num_classes: int
    feature_dim: int
    support_size: int
    query_size: int
    label_map: dict[tuple[str, int], int] = field(default_factory=dict)
    skipped_identities: int = 0

    def __len__(self) -> int:
        return len(self.tasks)


def _parse_float(value: str, path, lineno: int) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ValueError(f"{path}:{lineno}: malformed number {value!r}") from exc


def parse_ground_truth(path) -> list[GtBox]:
    """Read ground-truth rows; malformed rows raise with their line number."""
    path = Path(path)
    rows: list[GtBox] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 9:
            raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        frame = int(_parse_float(parts[0], path, lineno))
        identity = int(_parse_float(parts[1], path, lineno))
        left, top, w, h = (_parse_float(p, path, lineno) for p in parts[2:6])
        conf = _parse_float(parts[6], path, lineno)
        category = int(_parse_float(parts[7], path, lineno))
        vis = _parse_float(parts[8], path, lineno)
        if frame < 1:
            raise ValueError(f"{path}:{lineno}: frame numbers start at 1")
        if w <= 0 or h <= 0:
            raise ValueError(f"{path}:{lineno}: box must have positive size")
        rows.append(GtBox(frame, identity, left, top, w, h, conf, category, vis))
    return rows


def parse_detections(path) -> list[DetBox]:
    """Read detection rows (identity field ignored)."""
    path = Path(path)
    rows: list[DetBox] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 7:
            raise ValueError(f"{path}:{lineno}: expected at least 7 fields")
        frame = int(_parse_float(parts[0], path, lineno))
        left, top, w, h = (_parse_float(p, path, lineno) for p in parts[2:6])
        conf = _parse_float(parts[6], path, lineno)
        if frame < 1:
            raise ValueError(f"{path}:{lineno}: frame numbers start at 1")
        if w <= 0 or h <= 0:
            raise ValueError(f"{path}:{lineno}: box must have positive size")
        rows.append(DetBox(frame, left, top, w, h, conf))
    return rows


def parse_results(path) -> list[ResultRow]:
    """Read tracker output rows (same layout as detections, with real ids)."""
    path = Path(path)
    rows: list[ResultRow] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 7:
            raise ValueError(f"{path}:{lineno}: expected at least 7 fields")
        frame = int(_parse_float(parts[0], path, lineno))
        identity = int(_parse_float(parts[1], path, lineno))
        left, top, w, h = (_parse_float(p, path, lineno) for p in parts[2:6])
        conf = _parse_float(parts[6], path, lineno)
        if frame < 1:
            raise ValueError(f"{path}:{lineno}: frame numbers start at 1")
        if identity < 0:
            raise ValueError(f"{path}:{lineno}: result rows need a track id")
        if w <= 0 or h <= 0:
            raise ValueError(f"{path}:{lineno}: box must have positive size")
        rows.append(ResultRow(frame, identity, left, top, w, h, conf))
    return rows


def write_ground_truth(path, rows: Iterable[GtBox]) -> None:
    with Path(path).open("w") as fh:
        for r in rows:
            fh.write(
                f"{r.frame},{r.identity},{r.left:.2f},{r.top:.2f},"
                f"{r.width:.2f},{r.height:.2f},{r.conf:g},{r.category},"
                f"{r.visibility:g}\n"
            )


def write_detections(path, rows: Iterable[DetBox]) -> None:
    with Path(path).open("w") as fh:
        for r in rows:
            fh.write(
                f"{r.frame},-1,{r.left:.2f},{r.top:.2f},{r.width:.2f},"
                f"{r.height:.2f},{r.conf:.6f},-1,-1,-1\n"
            )


def ingest_ground_truth(rows: Sequence[GtBox], features: FeatureStore,
                        sequence: str) -> list[LabeledSample]:
    """Join ground-truth boxes with their appearance features.

    Rows of other object classes are skipped (count logged), as are rows
    flagged inactive with conf == 0.  A flagged row without a stored feature
    is a data error and raises.
    """
    samples: list[LabeledSample] = []
    skipped_class = 0
    skipped_inactive = 0
    for r in rows:
        if r.category != PEDESTRIAN_CLASS:
            skipped_class += 1
            continue
        if r.conf == 0:
            skipped_inactive += 1
            continue
        feature = features.get(sequence, r.frame, r.identity)
        samples.append(
            LabeledSample(feature, r.identity, frame=r.frame, sequence=sequence)
        )
    if skipped_class or skipped_inactive:
        log.info(
            "ingest %s: kept %d rows, skipped %d other-class, %d inactive",
            sequence, len(samples), skipped_class, skipped_inactive,
        )
    return samples


def build_tasks(samples: Sequence[LabeledSample], support_size: int,
                query_size: int, identities_per_task: int = 1) -> TaskDistribution:
    """Split each identity's timeline into support (earliest k) and query
    (next q), then group identities into tasks.

    Identities with fewer than k + q appearances are dropped and counted.
    Raises :class:`EmptyTaskSetError` when nothing survives.
    """
    if support_size < 1 or query_size < 1:
        raise ValueError("support and query sizes must be at least 1")
    if identities_per_task < 1:
        raise ValueError("identities_per_task must be at least 1")
    if not samples:
        raise EmptyTaskSetError("no samples to build tasks from")

    dim = samples[0].feature.shape[0]
    groups: dict[tuple[str, int], list[LabeledSample]] = {}
    seen_frames: set[tuple[str, int, int]] = set()
    for s in samples:
        if s.feature.shape[0] != dim:
            raise ValueError("inconsistent feature dimensions across samples")
        key = (s.sequence, s.identity)
        frame_key = (s.sequence, s.identity, s.frame)
        if frame_key in seen_frames:
            raise ValueError(
                f"identity {s.identity} appears twice in frame {s.frame} "
                f"of sequence {s.sequence!r}"
            )
        seen_frames.add(frame_key)
        groups.setdefault(key, []).append(s)

    needed = support_size + query_size
    survivors: list[tuple[str, int]] = []
    skipped = 0
    for key in sorted(groups):
        if len(groups[key]) >= needed:
            survivors.append(key)
        else:
            skipped += 1
    if not survivors:
        raise EmptyTaskSetError(
            f"no identity has {needed} appearances (k={support_size}, q={query_size})"
        )

    label_map = {key: i for i, key in enumerate(survivors)}
    num_classes = len(survivors)

    def relabel(sample: LabeledSample, label: int) -> LabeledSample:
        return LabeledSample(sample.feature, label, frame=sample.frame,
                             sequence=sample.sequence)

    tasks: list[EpisodeTask] = []
    by_sequence: dict[str, list[tuple[str, int]]] = {}
    for key in survivors:
        by_sequence.setdefault(key[0], []).append(key)
    for sequence in sorted(by_sequence):
        keys = by_sequence[sequence]
        for start in range(0, len(keys), identities_per_task):
            chunk = keys[start : start + identities_per_task]
            support: list[LabeledSample] = []
            query: list[LabeledSample] = []
            for key in chunk:
                timeline = sorted(groups[key], key=lambda s: s.frame)
                label = label_map[key]
                support.extend(relabel(s, label) for s in timeline[:support_size])
                query.extend(
                    relabel(s, label)
                    for s in timeline[support_size : support_size + query_size]
                )
            tasks.append(
                EpisodeTask(
                    task_id=len(tasks),
                    sequence=sequence,
                    identities=tuple(key[1] for key in chunk),
                    support=tuple(support),
                    query=tuple(query),
                )
            )
    if skipped:
        log.info("build_tasks: dropped %d identities with < %d appearances",
                 skipped, needed)
    return TaskDistribution(
        tasks=tasks,
        num_classes=num_classes,
        feature_dim=dim,
        support_size=support_size,
        query_size=query_size,
        label_map=dict(label_map),
        skipped_identities=skipped,
    )


def sample_batch(dist: TaskDistribution, batch_size: int,
                 rng: np.random.Generator) -> list[EpisodeTask]:
    """Uniform sample of distinct tasks; deterministic under a seeded rng."""
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    if batch_size > len(dist.tasks):
        raise ValueError(
            f"batch size {batch_size} exceeds task count {len(dist.tasks)}"
        )
    idx = rng.choice(len(dist.tasks), size=batch_size, replace=False)
    return [dist.tasks[i] for i in idx]
