"""Tracking evaluation: CLEAR statistics and identity-level measures.

The frame-by-frame pass keeps each ground-truth object's last matched
prediction alive: if that pair still overlaps above the threshold it is kept
before any fresh assignment happens, so momentary proximity of another
track cannot steal an established correspondence.  Identity switches count
the frames where an object's matched track id differs from the last one it
ever had.  MOTA is 1 - (FN + FP + IDSW) / GT.

Identity-level scores come from one global trajectory-to-trajectory
assignment (not the per-frame one): every ground-truth trajectory either
pairs with a track or with a dummy, minimizing total mismatched frames.
IDF1 is 2 IDTP / (2 IDTP + IDFP + IDFN) under that pairing.

Scores pool across sequences by summing the integer counts and recomputing
the rates from the sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from metatrack.episodes import GtBox, ResultRow, PEDESTRIAN_CLASS
from metatrack.numkit import solve_assignment

__all__ = [
    "Box",
    "iou",
    "FrameObjects",
    "frames_from_gt",
    "frames_from_results",
    "ClearStats",
    "IdStats",
    "SequenceScores",
    "EvalReport",
    "clear_mot",
    "id_metrics",
    "evaluate_sequences",
    "render_table",
    "render_kv",
]

Box = tuple[float, float, float, float]  # left, top, width, height

# frame number -> [(identity, box), ...]
FrameObjects = dict[int, list[tuple[int, Box]]]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (left, top, width, height) boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("boxes must have positive width and height")
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    iw = max(0.0, ix2 - ix)
    ih = max(0.0, iy2 - iy)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union


def _insert(frames: FrameObjects, frame: int, identity: int, box: Box) -> None:
    bucket = frames.setdefault(frame, [])
    if any(existing == identity for existing, _ in bucket):
        raise ValueError(f"identity {identity} appears twice in frame {frame}")
    bucket.append((identity, box))


def frames_from_gt(rows: Iterable[GtBox], include_all: bool = False) -> FrameObjects:
    """Ground-truth boxes by frame, keeping only flagged pedestrian rows."""
    frames: FrameObjects = {}
    for r in rows:
        if not include_all and (r.category != PEDESTRIAN_CLASS or r.conf == 0):
            continue
        _insert(frames, r.frame, r.identity, (r.left, r.top, r.width, r.height))
    return frames


def frames_from_results(rows: Iterable[ResultRow]) -> FrameObjects:
    frames: FrameObjects = {}
    for r in rows:
        _insert(frames, r.frame, r.identity, (r.left, r.top, r.width, r.height))
    return frames


@dataclass
class ClearStats:
    gt_total: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    id_switches: int = 0
    matches: int = 0
    iou_sum: float = 0.0

    @property
    def mota(self) -> float:
        if self.gt_total == 0:
            return float("nan")
        penalties = self.false_negatives + self.false_positives + self.id_switches
        return 1.0 - penalties / self.gt_total

    @property
    def motp(self) -> float:
        if self.matches == 0:
            return float("nan")
        return self.iou_sum / self.matches

    def add(self, other: "ClearStats") -> None:
        self.gt_total += other.gt_total
        self.false_positives += other.false_positives
        self.false_negatives += other.false_negatives
        self.id_switches += other.id_switches
        self.matches += other.matches
        self.iou_sum += other.iou_sum


@dataclass
class IdStats:
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0

    @property
    def idp(self) -> float:
        denom = self.idtp + self.idfp
        return self.idtp / denom if denom else float("nan")

    @property
    def idr(self) -> float:
        denom = self.idtp + self.idfn
        return self.idtp / denom if denom else float("nan")

    @property
    def idf1(self) -> float:
        denom = 2 * self.idtp + self.idfp + self.idfn
        return 2 * self.idtp / denom if denom else float("nan")

    def add(self, other: "IdStats") -> None:
        self.idtp += other.idtp
        self.idfp += other.idfp
        self.idfn += other.idfn


@dataclass
class SequenceScores:
    clear: ClearStats
    ids: IdStats


@dataclass
class EvalReport:
    iou_threshold: float
    sequences: dict[str, SequenceScores] = field(default_factory=dict)

    @property
    def overall(self) -> SequenceScores:
        clear = ClearStats()
        ids = IdStats()
        for scores in self.sequences.values():
            clear.add(scores.clear)
            ids.add(scores.ids)
        return SequenceScores(clear, ids)


def clear_mot(gt: FrameObjects, pred: FrameObjects,
              iou_threshold: float = 0.5) -> ClearStats:
    """Frame-by-frame CLEAR statistics with persistent correspondences."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou threshold must be in (0, 1]")
    stats = ClearStats()
    last_match: dict[int, int] = {}  # gt id -> last matched pred id
    frames = sorted(set(gt) | set(pred))
    for frame in frames:
        gt_objs = gt.get(frame, [])
        pred_objs = pred.get(frame, [])
        stats.gt_total += len(gt_objs)
        gt_boxes = {i: b for i, b in gt_objs}
        pred_boxes = {i: b for i, b in pred_objs}

        matched: list[tuple[int, int, float]] = []
        # keep surviving correspondences before any fresh assignment
        for g in (i for i, _ in gt_objs):
            p = last_match.get(g)
            if p is None or p not in pred_boxes:
                continue
            overlap = iou(gt_boxes[g], pred_boxes[p])
            if overlap >= iou_threshold:
                matched.append((g, p, overlap))
                del pred_boxes[p]
        for g, _, _ in matched:
            del gt_boxes[g]

        free_gt = [i for i, _ in gt_objs if i in gt_boxes]
        free_pred = [i for i, _ in pred_objs if i in pred_boxes]
        if free_gt and free_pred:
            # far above any sum of admissible costs (each <= 1), so the
            # assignment never trades admissible pairs for gated ones
            big = 1e6
            cost = np.full((len(free_gt), len(free_pred)), big)
            overlaps = np.zeros_like(cost)
            for r, g in enumerate(free_gt):
                for c, p in enumerate(free_pred):
                    ov = iou(gt_boxes[g], pred_boxes[p])
                    overlaps[r, c] = ov
                    if ov >= iou_threshold:
                        cost[r, c] = 1.0 - ov
            for r, c in solve_assignment(cost):
                if overlaps[r, c] >= iou_threshold:
                    g, p = free_gt[r], free_pred[c]
                    matched.append((g, p, overlaps[r, c]))
                    del gt_boxes[g]
                    del pred_boxes[p]

        stats.false_negatives += len(gt_boxes)
        stats.false_positives += len(pred_boxes)
        for g, p, overlap in matched:
            stats.matches += 1
            stats.iou_sum += overlap
            prior = last_match.get(g)
            if prior is not None and prior != p:
                stats.id_switches += 1
            last_match[g] = p
    return stats


def _trajectories(frames: FrameObjects) -> dict[int, dict[int, Box]]:
    out: dict[int, dict[int, Box]] = {}
    for frame, objs in frames.items():
        for identity, box in objs:
            out.setdefault(identity, {})[frame] = box
    return out


def id_metrics(gt: FrameObjects, pred: FrameObjects,
               iou_threshold: float = 0.5) -> IdStats:
    """Identity scores from one optimal global trajectory pairing."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou threshold must be in (0, 1]")
    gt_traj = _trajectories(gt)
    pred_traj = _trajectories(pred)
    gt_ids = sorted(gt_traj)
    pred_ids = sorted(pred_traj)
    n, m = len(gt_ids), len(pred_ids)
    total_gt = sum(len(t) for t in gt_traj.values())
    total_pred = sum(len(t) for t in pred_traj.values())
    if n == 0 and m == 0:
        return IdStats()

    overlap_counts = np.zeros((n, m), dtype=np.int64)
    for r, g in enumerate(gt_ids):
        for c, p in enumerate(pred_ids):
            shared = set(gt_traj[g]) & set(pred_traj[p])
            overlap_counts[r, c] = sum(
                1 for f in shared
                if iou(gt_traj[g][f], pred_traj[p][f]) >= iou_threshold
            )

    big = float(2 * (total_gt + total_pred) + 1)
    size = n + m
    cost = np.full((size, size), big)
    for r, g in enumerate(gt_ids):
        len_g = len(gt_traj[g])
        for c, p in enumerate(pred_ids):
            cost[r, c] = len_g + len(pred_traj[p]) - 2 * overlap_counts[r, c]
        cost[r, m + r] = float(len_g)  # leave this trajectory unmatched
    for c, p in enumerate(pred_ids):
        cost[n + c, c] = float(len(pred_traj[p]))
    cost[n:, m:] = 0.0

    idtp = 0
    for r, c in solve_assignment(cost):
        if r < n and c < m:
            idtp += int(overlap_counts[r, c])
    return IdStats(idtp=idtp, idfp=total_pred - idtp, idfn=total_gt - idtp)


def evaluate_sequences(pairs: Mapping[str, tuple[FrameObjects, FrameObjects]],
                       iou_threshold: float = 0.5) -> EvalReport:
    """Score several (ground truth, result) pairs and pool the counts."""
    report = EvalReport(iou_threshold=iou_threshold)
    for name in sorted(pairs):
        gt, pred = pairs[name]
        report.sequences[name] = SequenceScores(
            clear=clear_mot(gt, pred, iou_threshold),
            ids=id_metrics(gt, pred, iou_threshold),
        )
    return report


_COLUMNS = ("MOTA", "MOTP", "IDF1", "IDP", "IDR", "GT", "FP", "FN", "IDSW")


def _score_row(scores: SequenceScores) -> list[str]:
    c, i = scores.clear, scores.ids
    return [
        f"{c.mota:.3f}", f"{c.motp:.3f}", f"{i.idf1:.3f}",
        f"{i.idp:.3f}", f"{i.idr:.3f}",
        str(c.gt_total), str(c.false_positives),
        str(c.false_negatives), str(c.id_switches),
    ]


def render_table(report: EvalReport) -> str:
    """Aligned text table, one row per sequence plus a pooled OVERALL row."""
    rows = [("sequence",) + _COLUMNS]
    for name, scores in report.sequences.items():
        rows.append((name, *_score_row(scores)))
    if len(report.sequences) != 1:
        rows.append(("OVERALL", *_score_row(report.overall)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def render_kv(report: EvalReport) -> str:
    """Machine-readable 'sequence.metric value' lines."""
    lines = [f"iou_threshold {report.iou_threshold}"]
    items = list(report.sequences.items())
    items.append(("OVERALL", report.overall))
    for name, scores in items:
        c, i = scores.clear, scores.ids
        lines.extend([
            f"{name}.mota {c.mota:.6f}",
            f"{name}.motp {c.motp:.6f}",
            f"{name}.idf1 {i.idf1:.6f}",
            f"{name}.idp {i.idp:.6f}",
            f"{name}.idr {i.idr:.6f}",
            f"{name}.gt {c.gt_total}",
            f"{name}.fp {c.false_positives}",
            f"{name}.fn {c.false_negatives}",
            f"{name}.idsw {c.id_switches}",
            f"{name}.idtp {i.idtp}",
            f"{name}.idfp {i.idfp}",
            f"{name}.idfn {i.idfn}",
        ])
    return "\n".join(lines) + "\n"
