"""Evaluation checks: hand-traced CLEAR fixtures, identity-measure brute
force, and pooling behaviour."""

import itertools

import numpy as np
import pytest

from metatrack.episodes import GtBox, ResultRow
from metatrack.metrics import (
    ClearStats,
    EvalReport,
    IdStats,
    clear_mot,
    evaluate_sequences,
    frames_from_gt,
    frames_from_results,
    id_metrics,
    iou,
    render_kv,
    render_table,
)


def frames(rows):
    """rows of (frame, identity, box) -> FrameObjects"""
    out = {}
    for frame, identity, box in rows:
        out.setdefault(frame, []).append((identity, box))
    return out


BOX_A = (0.0, 0.0, 10.0, 10.0)
BOX_B = (100.0, 0.0, 10.0, 10.0)
FAR = (500.0, 500.0, 5.0, 5.0)


class TestIou:
    def test_frozen_values(self):
        assert iou(BOX_A, BOX_A) == 1.0
        assert iou(BOX_A, BOX_B) == 0.0
        np.testing.assert_allclose(iou((0, 0, 10, 10), (5, 0, 10, 10)), 1 / 3)
        np.testing.assert_allclose(iou((0, 0, 2, 2), (1, 1, 2, 2)), 1 / 7)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = (rng.uniform(0, 50), rng.uniform(0, 50),
                 rng.uniform(1, 20), rng.uniform(1, 20))
            b = (rng.uniform(0, 50), rng.uniform(0, 50),
                 rng.uniform(1, 20), rng.uniform(1, 20))
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)

    def test_contained_box(self):
        np.testing.assert_allclose(iou((0, 0, 10, 10), (2, 2, 5, 5)), 25 / 100)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            iou((0, 0, 0, 10), BOX_A)


class TestClearMot:
    def test_hand_traced_mota_fixture(self):
        # identity 1: tracked by 11 then 13 (one switch); identity 2: tracked
        # for 3 of 5 frames (two misses); one stray box (one false positive)
        gt = frames([(f, 1, BOX_A) for f in range(1, 6)]
                    + [(f, 2, BOX_B) for f in range(1, 6)])
        pred = frames(
            [(f, 11, BOX_A) for f in (1, 2)]
            + [(f, 13, BOX_A) for f in (3, 4, 5)]
            + [(f, 12, BOX_B) for f in (1, 2, 3)]
            + [(1, 19, FAR)]
        )
        stats = clear_mot(gt, pred)
        assert stats.gt_total == 10
        assert stats.false_positives == 1
        assert stats.false_negatives == 2
        assert stats.id_switches == 1
        np.testing.assert_allclose(stats.mota, 0.600, rtol=0, atol=1e-12)

    def test_persistence_resists_closer_newcomer(self):
        # 21 keeps identity 1 in frame 2 despite 22 overlapping perfectly;
        # when 21 disappears, switching to 22 costs exactly one IDSW
        shifted = (1.0, 0.0, 10.0, 10.0)  # IoU with BOX_A is 9/11
        gt = frames([(f, 1, BOX_A) for f in (1, 2, 3)])
        pred = frames([(1, 21, shifted), (2, 21, shifted),
                       (2, 22, BOX_A), (3, 22, BOX_A)])
        stats = clear_mot(gt, pred)
        assert stats.matches == 3
        assert stats.false_positives == 1  # 22 in frame 2
        assert stats.false_negatives == 0
        assert stats.id_switches == 1      # frame 3, 21 -> 22
        np.testing.assert_allclose(stats.iou_sum, 9 / 11 + 9 / 11 + 1.0)

    def test_empty_prediction_scores_zero(self):
        gt = frames([(f, 1, BOX_A) for f in (1, 2, 3)])
        stats = clear_mot(gt, {})
        assert stats.false_negatives == 3
        assert stats.mota == 0.0

    def test_rematch_same_id_after_gap_is_not_a_switch(self):
        gt = frames([(f, 1, BOX_A) for f in (1, 2, 3)])
        pred = frames([(1, 7, BOX_A), (3, 7, BOX_A)])
        stats = clear_mot(gt, pred)
        assert stats.id_switches == 0
        assert stats.false_negatives == 1

    def test_assignment_minimizes_distance_among_admissible(self):
        # both predictions overlap identity 1, but the closer one must win
        near = (0.0, 0.0, 10.0, 10.0)
        off = (4.0, 0.0, 10.0, 10.0)
        gt = frames([(1, 1, BOX_A)])
        pred = frames([(1, 31, off), (1, 32, near)])
        stats = clear_mot(gt, pred)
        assert stats.false_positives == 1
        np.testing.assert_allclose(stats.iou_sum, 1.0)

    def test_duplicate_identity_rejected(self):
        rows = [ResultRow(1, 5, 0, 0, 10, 10), ResultRow(1, 5, 20, 0, 10, 10)]
        with pytest.raises(ValueError, match="twice"):
            frames_from_results(rows)

    def test_gt_filtering(self):
        rows = [
            GtBox(1, 1, 0, 0, 10, 10),
            GtBox(1, 2, 20, 0, 10, 10, conf=0.0),      # inactive
            GtBox(1, 3, 40, 0, 10, 10, category=11),   # not a pedestrian
        ]
        assert sum(len(v) for v in frames_from_gt(rows).values()) == 1
        assert sum(len(v) for v in frames_from_gt(rows, include_all=True).values()) == 3


class TestIdMetrics:
    def test_hand_traced_idf1_fixture(self):
        # identity tracked 8 of 10 frames; the track also hallucinates twice
        gt = frames([(f, 1, BOX_A) for f in range(1, 11)])
        pred = frames([(f, 41, BOX_A) for f in range(1, 9)]
                      + [(f, 41, BOX_A) for f in (11, 12)])
        stats = id_metrics(gt, pred)
        assert stats.idtp == 8
        assert stats.idfp == 2
        assert stats.idfn == 2
        np.testing.assert_allclose(stats.idf1, 0.800, rtol=0, atol=1e-12)

    def test_fragmented_track_halves_idf1(self):
        gt = frames([(f, 1, BOX_A) for f in (1, 2, 3, 4)])
        pred = frames([(1, 51, BOX_A), (2, 51, BOX_A),
                       (3, 52, BOX_A), (4, 52, BOX_A)])
        stats = id_metrics(gt, pred)
        assert stats.idtp == 2
        np.testing.assert_allclose(stats.idf1, 0.5)

    def test_perfect_tracking_is_one(self):
        gt = frames([(f, i, (i * 30.0, 0, 10, 10))
                     for f in (1, 2, 3) for i in (1, 2)])
        pred = frames([(f, i + 100, (i * 30.0, 0, 10, 10))
                       for f in (1, 2, 3) for i in (1, 2)])
        stats = id_metrics(gt, pred)
        assert stats.idf1 == 1.0 and stats.idfp == 0 and stats.idfn == 0

    def test_harmonic_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            gt, pred = random_scene(rng)
            stats = id_metrics(gt, pred)
            if stats.idtp == 0:
                continue
            want = 2 * stats.idp * stats.idr / (stats.idp + stats.idr)
            np.testing.assert_allclose(stats.idf1, want, atol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            gt, pred = random_scene(rng, max_ids=3)
            got = id_metrics(gt, pred)
            want = brute_force_idtp(gt, pred)
            assert got.idtp == want


def random_scene(rng, max_ids=3, max_frames=5):
    """Unit boxes on a line; predictions jitter, drop, switch, and add."""
    gt_rows = []
    pred_rows = []
    next_pred_id = 100
    for i in range(int(rng.integers(1, max_ids + 1))):
        x = i * 30.0
        pid = next_pred_id + i
        for f in range(1, int(rng.integers(2, max_frames + 1))):
            gt_rows.append((f, i, (x, 0.0, 10.0, 10.0)))
            r = rng.uniform()
            if r < 0.2:
                continue  # missed
            jitter = 12.0 if r < 0.35 else rng.uniform(0, 2.0)
            if r > 0.85:
                pid = next_pred_id + i + 50  # id change mid-track
            pred_rows.append((f, pid, (x + jitter, 0.0, 10.0, 10.0)))
    for f in range(1, 3):
        if rng.uniform() < 0.3:
            pred_rows.append((f, 999, (400.0 + f, 0.0, 10.0, 10.0)))
    return frames(gt_rows), frames(pred_rows)


def brute_force_idtp(gt, pred, iou_threshold=0.5):
    """Maximum total per-frame overlaps over all trajectory pairings."""
    gt_traj = {}
    for f, objs in gt.items():
        for i, b in objs:
            gt_traj.setdefault(i, {})[f] = b
    pred_traj = {}
    for f, objs in pred.items():
        for i, b in objs:
            pred_traj.setdefault(i, {})[f] = b
    gt_ids = sorted(gt_traj)
    pred_ids = sorted(pred_traj)
    n, m = len(gt_ids), len(pred_ids)
    size = max(n, m)
    matches = np.zeros((size, size))
    for r, g in enumerate(gt_ids):
        for c, p in enumerate(pred_ids):
            shared = set(gt_traj[g]) & set(pred_traj[p])
            matches[r, c] = sum(
                1 for f in shared
                if iou(gt_traj[g][f], pred_traj[p][f]) >= iou_threshold
            )
    best = 0.0
    for perm in itertools.permutations(range(size)):
        best = max(best, sum(matches[i, perm[i]] for i in range(size)))
    return int(best)


class TestAggregation:
    def test_pooled_counts_are_sums(self):
        rng = np.random.default_rng(3)
        scenes = {f"seq{k}": random_scene(rng) for k in range(3)}
        report = evaluate_sequences(scenes)
        overall = report.overall
        assert overall.clear.gt_total == sum(
            s.clear.gt_total for s in report.sequences.values())
        assert overall.ids.idtp == sum(
            s.ids.idtp for s in report.sequences.values())
        fn = sum(s.clear.false_negatives for s in report.sequences.values())
        fp = sum(s.clear.false_positives for s in report.sequences.values())
        sw = sum(s.clear.id_switches for s in report.sequences.values())
        want = 1 - (fn + fp + sw) / overall.clear.gt_total
        np.testing.assert_allclose(overall.clear.mota, want, atol=1e-12)

    def test_deleting_a_prediction_never_improves_scores(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            gt, _ = random_scene(rng)
            # perfect predictions, new ids
            pred = {f: [(i + 500, b) for i, b in objs] for f, objs in gt.items()}
            base_clear = clear_mot(gt, pred)
            base_ids = id_metrics(gt, pred)
            assert base_clear.mota == 1.0 and base_ids.idf1 == 1.0
            # drop one box
            frame = sorted(pred)[int(rng.integers(0, len(pred)))]
            if not pred[frame]:
                continue
            clipped = {f: list(objs) for f, objs in pred.items()}
            clipped[frame] = clipped[frame][1:]
            assert clear_mot(gt, clipped).mota < 1.0
            assert id_metrics(gt, clipped).idf1 < 1.0

    def test_render_table_and_kv(self):
        gt = frames([(f, 1, BOX_A) for f in (1, 2)])
        pred = frames([(f, 9, BOX_A) for f in (1, 2)])
        report = evaluate_sequences({"demo": (gt, pred)})
        table = render_table(report)
        assert "MOTA" in table and "demo" in table
        kv = render_kv(report)
        assert "demo.mota 1.000000" in kv
        assert "OVERALL.idf1 1.000000" in kv
        assert "demo.gt 2" in kv
