"""Tracking by detection with a per-scene adapted appearance head.

Association is appearance-first: the cost of pairing a track with a
detection is one minus the cosine of their embeddings under the session's
current head, gated to infinity when the boxes do not overlap enough.
Motion is modeled as constant position (a track predicts its last box).

The head itself changes while tracking.  When a track is first confirmed,
the session head is re-seeded from the task memory bank using the track's
first appearance feature (similarity-weighted over remembered tasks), and on
frames with confidently matched tracks the head takes one small alignment
step toward the tracks' running appearance.  Disabling adaptation freezes
the meta-trained head for the whole sequence.

All tie-breaking is positional (lowest track id, then detection order), so
a fixed input yields identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from metatrack.maml import TaskMemoryEntry
from metatrack.metrics import Box, iou
from metatrack.model import FeatureStore, HeadParams, embed
from metatrack.numkit import solve_assignment
from metatrack.numkit.vecmath import as_vector, cosine_similarity, unit
from metatrack.online import OnlineState, init_new_task, online_step

__all__ = [
    "Detection",
    "Track",
    "TrackState",
    "TrackerParams",
    "FrameSummary",
    "TrackerSession",
    "association_cost",
    "write_results",
    "track_sequence",
]

_GATED = 1e6  # finite stand-in for an inadmissible pair


class TrackState(Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    LOST = "lost"


@dataclass(frozen=True)
class Detection:
    box: Box
    feature: np.ndarray
    conf: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "feature", as_vector(self.feature, "feature"))
        left, top, w, h = self.box
        if w <= 0 or h <= 0:
            raise ValueError("detection box must have positive size")


@dataclass
class Track:
    track_id: int
    state: TrackState
    first_feature: np.ndarray
    ema_feature: np.ndarray  # unit norm, exponential moving average
    last_box: Box
    hits: int = 1
    misses: int = 0
    ever_confirmed: bool = False
    history: list[tuple[int, Box, float]] = field(default_factory=list)


@dataclass(frozen=True)
class TrackerParams:
    """Association and lifecycle knobs; defaults suit the synthetic scenes."""

    match_threshold: float = 0.4  # on 1 - cos(embedding) in [0, 2]
    iou_gate: float = 0.1
    n_init: int = 3
    max_age: int = 30
    ema_weight: float = 0.1
    adapt: bool = True
    online_alpha: float = 5e-3
    pseudo_label_margin: float = 0.1
    top_m: int | None = None
    similarity_form: str = "stacked"

    def __post_init__(self):
        if not 0 < self.match_threshold <= 2:
            raise ValueError("match_threshold must be in (0, 2]")
        if not 0 <= self.iou_gate <= 1:
            raise ValueError("iou_gate must be in [0, 1]")
        if self.n_init < 1 or self.max_age < 1:
            raise ValueError("n_init and max_age must be at least 1")
        if not 0 < self.ema_weight <= 1:
            raise ValueError("ema_weight must be in (0, 1]")
        if self.online_alpha < 0:
            raise ValueError("online_alpha must be non-negative")
        if self.pseudo_label_margin < 0:
            raise ValueError("pseudo_label_margin must be non-negative")


@dataclass
class FrameSummary:
    frame: int
    matches: list[tuple[int, int, float]]  # (track_id, detection index, cost)
    spawned: list[int]
    confirmed: list[int]
    lost: list[int]
    reseeded: bool = False
    refined: bool = False


def association_cost(track: Track, detection: Detection, head: HeadParams,
                     iou_gate: float) -> float:
    """1 - cos of the embedded appearances; gated on box overlap."""
    if iou(track.last_box, detection.box) < iou_gate:
        return float("inf")
    e_track = embed(head, track.ema_feature)
    e_det = embed(head, detection.feature)
    return 1.0 - cosine_similarity(e_track, e_det)


class TrackerSession:
    """Tracks one sequence; feed frames in order via :meth:`step`."""

    def __init__(self, meta_head: HeadParams, memory: Sequence[TaskMemoryEntry],
                 params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        self.meta_head = meta_head
        self.memory = list(memory)
        self.state = OnlineState(head=meta_head, gammas=(), lam=0.0)
        self.tracks: list[Track] = []
        self.last_frame = 0
        self._next_id = 1

    @property
    def head(self) -> HeadParams:
        return self.state.head

    def active_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.state is not TrackState.LOST]

    def step(self, frame: int, detections: Sequence[Detection]) -> FrameSummary:
        if frame <= self.last_frame:
            raise ValueError(f"frames must be strictly increasing "
                             f"(got {frame} after {self.last_frame})")
        p = self.params
        head = self.head
        active = sorted(self.active_tracks(), key=lambda t: t.track_id)

        # appearance association, gated by overlap
        matches: list[tuple[int, int, float]] = []  # (active idx, det idx, cost)
        if active and detections:
            cost = np.full((len(active), len(detections)), _GATED)
            for r, track in enumerate(active):
                for c, det in enumerate(detections):
                    value = association_cost(track, det, head, p.iou_gate)
                    if np.isfinite(value):
                        cost[r, c] = value
            for r, c in solve_assignment(cost):
                if cost[r, c] <= p.match_threshold:
                    matches.append((r, c, float(cost[r, c])))

        # pseudo-labeled pairs for the online step: confident matches of
        # established tracks, targeted at their pre-update appearance
        refine_pairs = []
        if p.adapt:
            for r, c, value in matches:
                track = active[r]
                if (track.state is TrackState.CONFIRMED
                        and value <= p.match_threshold - p.pseudo_label_margin):
                    target = embed(head, track.ema_feature)
                    refine_pairs.append((detections[c].feature, target))

        cohort_active = any(t.state is TrackState.CONFIRMED for t in active)
        matched_tracks = set()
        matched_dets = set()
        newly_confirmed: list[Track] = []
        for r, c, value in matches:
            track, det = active[r], detections[c]
            matched_tracks.add(track.track_id)
            matched_dets.add(c)
            track.hits += 1
            track.misses = 0
            track.last_box = det.box
            track.history.append((frame, det.box, det.conf))
            blended = ((1 - p.ema_weight) * track.ema_feature
                       + p.ema_weight * unit(det.feature))
            track.ema_feature = unit(blended)
            if track.state is TrackState.TENTATIVE and track.hits >= p.n_init:
                track.state = TrackState.CONFIRMED
                track.ever_confirmed = True
                newly_confirmed.append(track)

        lost: list[int] = []
        for track in active:
            if track.track_id in matched_tracks:
                continue
            track.misses += 1
            track.hits = 0
            if track.state is TrackState.TENTATIVE:
                track.state = TrackState.LOST  # one miss kills an unconfirmed track
                lost.append(track.track_id)
            elif track.misses >= p.max_age:
                track.state = TrackState.LOST
                lost.append(track.track_id)

        spawned: list[int] = []
        for c, det in enumerate(detections):
            if c in matched_dets:
                continue
            track = Track(
                track_id=self._next_id,
                state=TrackState.TENTATIVE,
                first_feature=det.feature.copy(),
                ema_feature=unit(det.feature),
                last_box=det.box,
                history=[(frame, det.box, det.conf)],
            )
            self._next_id += 1
            self.tracks.append(track)
            spawned.append(track.track_id)

        # head maintenance: a confirmation that opens a new cohort re-seeds
        # from task memory (lowest track id picks the seed feature); later
        # confirmations join the session head, which confident matches keep
        # refining one alignment step at a time
        reseeded = False
        refined = False
        if p.adapt and newly_confirmed and not cohort_active:
            seed = min(newly_confirmed, key=lambda t: t.track_id)
            self.state = init_new_task(self.memory, seed.first_feature,
                                       self.meta_head, top_m=p.top_m,
                                       form=p.similarity_form)
            reseeded = True
        elif p.adapt and refine_pairs:
            self.state = online_step(self.state, refine_pairs, p.online_alpha)
            refined = True

        self.last_frame = frame
        return FrameSummary(
            frame=frame,
            matches=[(active[r].track_id, c, v) for r, c, v in matches],
            spawned=spawned,
            confirmed=[t.track_id for t in newly_confirmed],
            lost=lost,
            reseeded=reseeded,
            refined=refined,
        )


def write_results(tracks: Sequence[Track], path) -> str:
    """Write history rows of every ever-confirmed track, sorted by frame
    then track id, in the delimited tracking layout."""
    rows = []
    for track in tracks:
        if not track.ever_confirmed:
            continue
        for frame, box, conf in track.history:
            rows.append((frame, track.track_id, box, conf))
    rows.sort(key=lambda r: (r[0], r[1]))
    lines = []
    for frame, tid, (left, top, w, h), conf in rows:
        lines.append(f"{frame},{tid},{left:.2f},{top:.2f},{w:.2f},{h:.2f},"
                     f"{conf:.6f},-1,-1,-1")
    text = "\n".join(lines) + ("\n" if lines else "")
    Path(path).write_text(text)
    return text


def track_sequence(detections_by_frame: dict[int, list], features: FeatureStore,
                   sequence: str, meta_head: HeadParams,
                   memory: Sequence[TaskMemoryEntry],
                   params: TrackerParams | None = None,
                   ) -> tuple[TrackerSession, list[FrameSummary]]:
    """Run a session over detection boxes joined with stored features.

    ``detections_by_frame`` maps frame -> list of DetBox-like rows; the
    k-th row of a frame is joined with the stored feature for detection
    ordinal k.  Missing features raise KeyError.
    """
    session = TrackerSession(meta_head, memory, params)
    summaries = []
    for frame in sorted(detections_by_frame):
        dets = []
        for ordinal, row in enumerate(detections_by_frame[frame]):
            feature = features.get_detection(sequence, frame, ordinal)
            dets.append(Detection(
                box=(row.left, row.top, row.width, row.height),
                feature=feature,
                conf=row.conf,
            ))
        summaries.append(session.step(frame, dets))
    return session, summaries
