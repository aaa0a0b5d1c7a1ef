"""Episodic meta-training of the re-identification head.

Each step draws a batch of tasks, adapts a copy of the shared parameters on
every task's support set (one or more plain gradient steps), measures the
query loss of the adapted copy, and moves the shared parameters against the
sum of the per-task meta-gradients.  The shared parameters themselves are
never touched by the inner loop; adapted copies are discarded once their
query contribution is taken.

Two meta-gradient modes exist and must stay distinguishable: ``exact``
differentiates through the inner step, contributing ``(I - a H_S) g_Q`` per
task via a Hessian-vector product, while ``first_order`` drops the curvature
term and uses the query gradient at the adapted point alone.

After training, each task's adapted head is recomputed from the final shared
parameters and stored in a task memory bank for use at tracking time.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from metatrack.episodes import EpisodeTask, TaskDistribution, sample_batch
from metatrack.model import HeadParams, LabeledSample, make_cross_entropy_loss, task_loss
from metatrack.numkit import autodiff as ad

__all__ = [
    "MamlConfig",
    "TaskMemoryEntry",
    "EpochStats",
    "TrainLog",
    "TrainResult",
    "inner_adapt",
    "meta_gradient",
    "meta_gradient_from_losses",
    "evaluate_meta_loss",
    "train",
    "build_task_memory",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("exact", "first_order")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MamlConfig:
    """Training hyperparameters.

    Defaults follow the published recipe: inner rate 5e-3, outer rate 1e-4,
    one inner step, 60 epochs.  ``inner_lr`` may be zero, which collapses
    both modes onto the plain query gradient.
    """

    inner_lr: float = 5e-3
    outer_lr: float = 1e-4
    inner_steps: int = 1
    epochs: int = 60
    batch_size: int = 8
    mode: str = "exact"
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self):
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")
        if self.outer_lr <= 0:
            raise ValueError("outer_lr must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "exact" and self.inner_steps != 1:
            raise ValueError("exact mode differentiates a single inner step; "
                             "use first_order for multi-step adaptation")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


@dataclass(frozen=True)
class TaskMemoryEntry:
    """One trained task: its support evidence and its adapted head."""

    task_id: int
    sequence: str
    identities: tuple[int, ...]
    support_centroid: np.ndarray
    support_features: np.ndarray  # (k, D), support order preserved
    params: HeadParams
    adapted_loss: float


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    meta_loss: float  # mean query loss per task over this epoch's batches
    grad_norm: float  # mean meta-gradient norm over this epoch's steps
    eval_loss: float  # adapted query loss on the fixed eval batch, or nan
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    aborted: bool = False


@dataclass
class TrainResult:
    head: HeadParams
    memory: list[TaskMemoryEntry]
    log: TrainLog


LossFn = Callable[[ad.Node], ad.Node]


def inner_adapt(head: HeadParams, support: Sequence[LabeledSample], alpha: float,
                steps: int = 1, loss_fn: LossFn | None = None) -> HeadParams:
    """Gradient-descend a copy of the head on the support loss.

    The default loss is the mean cross-entropy over ``support``; tests may
    substitute any graph function of the flat parameters via ``loss_fn``.
    The input head is never modified.
    """
    if alpha < 0:
        raise ValueError("adaptation rate must be non-negative")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if loss_fn is None:
        loss_fn = make_cross_entropy_loss(support, head.num_classes, head.feature_dim)
    theta = head.flat()
    for _ in range(steps):
        theta = theta - alpha * ad.gradient(loss_fn, theta)
    return HeadParams.from_flat(theta, head.num_classes, head.feature_dim)


def _single_meta_gradient(theta: np.ndarray, support_fn: LossFn, query_fn: LossFn,
                          alpha: float, steps: int, mode: str) -> tuple[float, np.ndarray]:
    adapted = theta
    for _ in range(steps):
        adapted = adapted - alpha * ad.gradient(support_fn, adapted)
    query_value, query_grad = ad.value_and_gradient(query_fn, adapted)
    if mode == "exact":
        # d/dtheta L_Q(theta - a grad L_S(theta)) = (I - a H_S(theta)) g_Q
        hv = ad.hessian_vector_product(support_fn, theta, query_grad)
        return query_value, query_grad - alpha * hv
    return query_value, query_grad


def meta_gradient_from_losses(theta, loss_pairs: Sequence[tuple[LossFn, LossFn]],
                              alpha: float, mode: str = "exact",
                              steps: int = 1) -> np.ndarray:
    """Summed meta-gradient over (support_loss, query_loss) graph pairs."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "exact" and steps != 1:
        raise ValueError("exact mode requires a single inner step")
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros_like(theta)
    for support_fn, query_fn in loss_pairs:
        _, g = _single_meta_gradient(theta, support_fn, query_fn, alpha, steps, mode)
        out += g
    return out


def _task_losses(task: EpisodeTask, num_classes: int, dim: int) -> tuple[LossFn, LossFn]:
    support_fn = make_cross_entropy_loss(task.support, num_classes, dim)
    query_fn = make_cross_entropy_loss(task.query, num_classes, dim)
    return support_fn, query_fn


def meta_gradient(head: HeadParams, tasks: Sequence[EpisodeTask],
                  config: MamlConfig) -> np.ndarray:
    """Summed per-task meta-gradient of the batch, at the head's parameters."""
    if not tasks:
        raise ValueError("meta gradient needs at least one task")
    pairs = [_task_losses(t, head.num_classes, head.feature_dim) for t in tasks]
    return meta_gradient_from_losses(head.flat(), pairs, config.inner_lr,
                                     config.mode, config.inner_steps)


def evaluate_meta_loss(head: HeadParams, tasks: Sequence[EpisodeTask],
                       alpha: float, steps: int = 1) -> float:
    """Mean adapted query loss over a fixed batch of tasks."""
    if not tasks:
        raise ValueError("evaluation needs at least one task")
    total = 0.0
    for task in tasks:
        adapted = inner_adapt(head, task.support, alpha, steps)
        total += task_loss(adapted, task.query)
    return total / len(tasks)


def build_task_memory(head: HeadParams, dist: TaskDistribution,
                      config: MamlConfig) -> list[TaskMemoryEntry]:
    """Adapt the trained head once per task and record the outcomes."""
    memory: list[TaskMemoryEntry] = []
    for task in dist.tasks:
        adapted = inner_adapt(head, task.support, config.inner_lr, config.inner_steps)
        feats = np.stack([s.feature for s in task.support])
        memory.append(
            TaskMemoryEntry(
                task_id=task.task_id,
                sequence=task.sequence,
                identities=task.identities,
                support_centroid=feats.mean(axis=0),
                support_features=feats,
                params=adapted,
                adapted_loss=task_loss(adapted, task.query),
            )
        )
    return memory


def train(dist: TaskDistribution, config: MamlConfig,
          init_head: HeadParams | None = None,
          eval_tasks: Sequence[EpisodeTask] | None = None) -> TrainResult:
    """Meta-train the shared head over the task distribution.

    One epoch runs ``max(1, tasks // batch_size)`` outer steps on freshly
    sampled batches.  A non-finite loss or parameter update aborts training
    and returns the last finite parameters.  When ``eval_tasks`` is given,
    the adapted query loss on that fixed batch is logged every epoch.
    """
    num_classes, dim = dist.num_classes, dist.feature_dim
    rng = np.random.default_rng(config.seed)
    if init_head is None:
        head = HeadParams.initial(num_classes, dim, rng, config.init_scale)
    else:
        if (init_head.num_classes, init_head.feature_dim) != (num_classes, dim):
            raise ValueError("initial head shape does not match the distribution")
        head = init_head
    theta = head.flat()
    batch = min(config.batch_size, len(dist.tasks))
    steps_per_epoch = max(1, len(dist.tasks) // batch)

    log = TrainLog()
    for epoch in range(config.epochs):
        started = time.perf_counter()
        loss_total = 0.0
        norm_total = 0.0
        steps_done = 0
        for _ in range(steps_per_epoch):
            tasks = sample_batch(dist, batch, rng)
            # overflow here is an expected, handled outcome: the checked
            # graph ops raise and the guard below keeps the last finite theta
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    pairs = [_task_losses(t, num_classes, dim) for t in tasks]
                    grad = np.zeros_like(theta)
                    batch_loss = 0.0
                    for support_fn, query_fn in pairs:
                        value, g = _single_meta_gradient(
                            theta, support_fn, query_fn,
                            config.inner_lr, config.inner_steps, config.mode,
                        )
                        batch_loss += value
                        grad += g
                    candidate = theta - config.outer_lr * grad
            except ad.DifferentiationError:
                log.aborted = True
                break
            if not (np.isfinite(batch_loss) and np.all(np.isfinite(candidate))):
                log.aborted = True
                break
            theta = candidate
            loss_total += batch_loss
            norm_total += float(np.linalg.norm(grad))
            steps_done += 1
        if eval_tasks:
            eval_loss = evaluate_meta_loss(
                HeadParams.from_flat(theta, num_classes, dim),
                eval_tasks, config.inner_lr, config.inner_steps,
            )
        else:
            eval_loss = float("nan")
        denom = max(1, steps_done)
        log.epochs.append(
            EpochStats(
                epoch=epoch,
                meta_loss=loss_total / (denom * batch),
                grad_norm=norm_total / denom,
                eval_loss=eval_loss,
                seconds=time.perf_counter() - started,
            )
        )
        if log.aborted:
            break

    final = HeadParams.from_flat(theta, num_classes, dim)
    # an aborted run has no trustworthy adapted heads to remember
    memory = [] if log.aborted else build_task_memory(final, dist, config)
    return TrainResult(head=final, memory=memory, log=log)


def save_checkpoint(path, head: HeadParams, memory: Sequence[TaskMemoryEntry],
                    config: MamlConfig) -> None:
    """Serialize head, memory bank, and config as JSON.

    Floats are written with shortest round-trip precision, so a load/save
    cycle reproduces the file byte for byte.
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "head": {
            "num_classes": head.num_classes,
            "feature_dim": head.feature_dim,
            "flat": head.flat().tolist(),
        },
        "memory": [
            {
                "task_id": e.task_id,
                "sequence": e.sequence,
                "identities": list(e.identities),
                "support_centroid": e.support_centroid.tolist(),
                "support_features": e.support_features.tolist(),
                "flat_params": e.params.flat().tolist(),
                "adapted_loss": e.adapted_loss,
            }
            for e in memory
        ],
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple[HeadParams, list[TaskMemoryEntry], MamlConfig]:
    path = Path(path)
    payload = json.loads(path.read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    config = MamlConfig(**payload["config"])
    num_classes = int(payload["head"]["num_classes"])
    dim = int(payload["head"]["feature_dim"])
    head = HeadParams.from_flat(np.array(payload["head"]["flat"]), num_classes, dim)
    memory = []
    for e in payload["memory"]:
        memory.append(
            TaskMemoryEntry(
                task_id=int(e["task_id"]),
                sequence=e["sequence"],
                identities=tuple(int(i) for i in e["identities"]),
                support_centroid=np.array(e["support_centroid"], dtype=np.float64),
                support_features=np.array(e["support_features"], dtype=np.float64),
                params=HeadParams.from_flat(np.array(e["flat_params"]),
                                            num_classes, dim),
                adapted_loss=float(e["adapted_loss"]),
            )
        )
    return head, memory, config
