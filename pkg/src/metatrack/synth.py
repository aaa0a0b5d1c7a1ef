"""Synthetic tracking scenes with known ground truth.

Each identity is a unit vector in feature space plus a moving box in the
arena.  Every frame emits ground-truth rows, detector-style rows (with
misses, box jitter, and Poisson false positives), and appearance features:
real detections observe a noisy copy of their identity's vector, false
positives observe unrelated random directions.

Two presets exist: scattered identities drifting with wall bounces, and a
two-identity crossing where the boxes pass through each other mid-sequence,
which is the stress case for identity assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from metatrack.episodes import DetBox, GtBox, write_detections, write_ground_truth
from metatrack.model import FeatureStore, detection_key, write_features

__all__ = ["SynthConfig", "SynthScene", "crossing_config", "generate", "write_scene"]

PRESETS = ("scatter", "crossing")


@dataclass(frozen=True)
class SynthConfig:
    preset: str = "scatter"
    num_identities: int = 10
    num_frames: int = 100
    feature_dim: int = 16
    arena_width: float = 640.0
    arena_height: float = 480.0
    box_width: float = 24.0
    box_height: float = 48.0
    speed: float = 3.0
    motion_jitter: float = 0.4
    bbox_jitter: float = 1.0
    feature_noise: float = 0.05
    miss_rate: float = 0.05
    fp_rate: float = 0.2
    min_angle_deg: float = 30.0
    crossing_angle_deg: float = 45.0  # identity separation in the crossing preset

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")
        if self.num_identities < 1 or self.num_frames < 1:
            raise ValueError("need at least one identity and one frame")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.box_width <= 0 or self.box_height <= 0:
            raise ValueError("box size must be positive")
        if (self.box_width * 2 > self.arena_width
                or self.box_height * 2 > self.arena_height):
            raise ValueError("arena too small for the configured boxes")
        if not 0 <= self.miss_rate < 1:
            raise ValueError("miss_rate must be in [0, 1)")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be non-negative")
        if not 0 < self.min_angle_deg < 90:
            raise ValueError("min_angle_deg must be in (0, 90)")
        if self.preset == "crossing" and self.num_identities != 2:
            raise ValueError("the crossing preset uses exactly 2 identities")


def crossing_config(**overrides) -> SynthConfig:
    """Two identities walking through each other along one line."""
    base = SynthConfig(
        preset="crossing",
        num_identities=2,
        num_frames=60,
        speed=4.0,
        motion_jitter=0.2,
        miss_rate=0.0,
        fp_rate=0.0,
    )
    return replace(base, **overrides)


@dataclass
class SynthScene:
    sequence: str
    config: SynthConfig
    gt: list[GtBox]
    detections: list[DetBox]
    features: FeatureStore
    identity_vectors: np.ndarray


def _sample_identity_vectors(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors with pairwise angles above the configured minimum."""
    if config.preset == "crossing":
        # exactly the requested separation: v2 in the plane of v1 and an
        # orthogonal direction
        v1 = rng.normal(0, 1, config.feature_dim)
        v1 /= np.linalg.norm(v1)
        raw = rng.normal(0, 1, config.feature_dim)
        ortho = raw - np.dot(raw, v1) * v1
        ortho /= np.linalg.norm(ortho)
        phi = math.radians(config.crossing_angle_deg)
        v2 = math.cos(phi) * v1 + math.sin(phi) * ortho
        return np.stack([v1, v2])
    max_cos = math.cos(math.radians(config.min_angle_deg))
    chosen: list[np.ndarray] = []
    for _ in range(10000):
        v = rng.normal(0, 1, config.feature_dim)
        v /= np.linalg.norm(v)
        if all(abs(float(np.dot(v, c))) <= max_cos for c in chosen):
            chosen.append(v)
            if len(chosen) == config.num_identities:
                return np.stack(chosen)
    raise ValueError(
        f"could not place {config.num_identities} identities at least "
        f"{config.min_angle_deg} degrees apart in {config.feature_dim} dims"
    )


def _initial_motion(config: SynthConfig, rng: np.random.Generator):
    """Center positions and velocities per identity."""
    w, h = config.arena_width, config.arena_height
    bw, bh = config.box_width, config.box_height
    positions = []
    velocities = []
    if config.preset == "crossing":
        y = h / 2
        positions = [np.array([w * 0.2, y]), np.array([w * 0.8, y])]
        velocities = [np.array([config.speed, 0.0]),
                      np.array([-config.speed, 0.0])]
    else:
        for _ in range(config.num_identities):
            positions.append(np.array([
                rng.uniform(bw, w - bw), rng.uniform(bh, h - bh)
            ]))
            angle = rng.uniform(0, 2 * math.pi)
            velocities.append(config.speed
                              * np.array([math.cos(angle), math.sin(angle)]))
    return positions, velocities


def generate(config: SynthConfig, seed: int, sequence: str | None = None) -> SynthScene:
    """Deterministically generate one scene from a config and seed."""
    rng = np.random.default_rng(seed)
    sequence = sequence or f"synth-{config.preset}-{seed}"
    vectors = _sample_identity_vectors(config, rng)
    positions, velocities = _initial_motion(config, rng)
    bw, bh = config.box_width, config.box_height
    half_w, half_h = bw / 2, bh / 2

    gt_rows: list[GtBox] = []
    det_rows: list[DetBox] = []
    store = FeatureStore(config.feature_dim)

    for frame in range(1, config.num_frames + 1):
        frame_dets: list[tuple[DetBox, np.ndarray]] = []
        for ident in range(config.num_identities):
            pos = positions[ident]
            vel = velocities[ident]
            pos = pos + vel + rng.normal(0, config.motion_jitter, 2)
            # reflect at the walls, keeping the whole box inside
            for axis, (lo, hi) in enumerate([
                (half_w, config.arena_width - half_w),
                (half_h, config.arena_height - half_h),
            ]):
                if pos[axis] < lo:
                    pos[axis] = 2 * lo - pos[axis]
                    vel[axis] = -vel[axis]
                elif pos[axis] > hi:
                    pos[axis] = 2 * hi - pos[axis]
                    vel[axis] = -vel[axis]
            positions[ident] = pos
            velocities[ident] = vel

            left, top = pos[0] - half_w, pos[1] - half_h
            gt_rows.append(GtBox(frame, ident + 1, left, top, bw, bh))
            feature = vectors[ident] + rng.normal(0, config.feature_noise,
                                                  config.feature_dim)
            feature /= np.linalg.norm(feature)
            store.put(sequence, frame, ident + 1, feature)

            missed = rng.uniform() < config.miss_rate
            if not missed:
                jl, jt = rng.normal(0, config.bbox_jitter, 2)
                det = DetBox(frame, left + jl, top + jt, bw, bh, conf=1.0)
                frame_dets.append((det, feature))

        for _ in range(rng.poisson(config.fp_rate)):
            left = rng.uniform(0, config.arena_width - bw)
            top = rng.uniform(0, config.arena_height - bh)
            noise_feature = rng.normal(0, 1, config.feature_dim)
            noise_feature /= np.linalg.norm(noise_feature)
            det = DetBox(frame, left, top, bw, bh, conf=1.0)
            frame_dets.append((det, noise_feature))

        for ordinal, (det, feature) in enumerate(frame_dets):
            det_rows.append(det)
            store.put(sequence, frame, detection_key(ordinal), feature)

    return SynthScene(
        sequence=sequence,
        config=config,
        gt=gt_rows,
        detections=det_rows,
        features=store,
        identity_vectors=vectors,
    )


def write_scene(scene: SynthScene, out_dir) -> dict[str, Path]:
    """Write gt.txt, det.txt, and features.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "gt": out / "gt.txt",
        "det": out / "det.txt",
        "features": out / "features.txt",
    }
    write_ground_truth(paths["gt"], scene.gt)
    write_detections(paths["det"], scene.detections)
    # per frame: ground-truth records first, then detection ordinals
    records = [(seq, frame, ident, vec)
               for (seq, frame, ident), vec in sorted(
                   scene.features.items(),
                   key=lambda kv: (kv[0][1], kv[0][2] < 0, abs(kv[0][2])),
               )]
    write_features(paths["features"], scene.config.feature_dim, records)
    return paths
