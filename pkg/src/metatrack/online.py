"""Similarity-weighted reuse of trained task heads at tracking time.

When a new identity appears, its first appearance feature is compared with
every remembered task's support set.  The comparison treats the new feature
as if it were tiled across the support set: with support features s_1..s_k
and new feature x,

    gamma = sum_j <x, s_j> / (sqrt(k ||x||^2) * sqrt(sum_j ||s_j||^2))

which lies in [-1, 1] by Cauchy-Schwarz on the stacked vectors.  Tasks with
positive gamma contribute their adapted parameters to the new head in
proportion to gamma; everything else is excluded.  A cheaper centroid form
(plain cosine against the support mean) is available behind a switch.

Subsequent frames refine the head with single gradient steps on an
alignment loss toward caller-chosen target embeddings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from metatrack.maml import TaskMemoryEntry
from metatrack.model import HeadParams, make_alignment_loss
from metatrack.numkit import autodiff as ad
from metatrack.numkit.vecmath import as_vector, cosine_similarity

__all__ = [
    "SIMILARITY_FORMS",
    "OnlineState",
    "task_similarity",
    "init_new_task",
    "online_step",
    "alignment_loss_value",
]

log = logging.getLogger(__name__)

SIMILARITY_FORMS = ("stacked", "centroid")


@dataclass(frozen=True)
class OnlineState:
    """Adapted head for one tracked scene, plus how it was initialized."""

    head: HeadParams
    gammas: tuple[tuple[int, float], ...]  # (task_id, similarity) for every entry
    lam: float  # sum of the positive similarities actually used
    frames_seen: int = 0
    used_fallback: bool = False
    weighted_loss: float = math.nan  # similarity-weighted adapted query loss


def task_similarity(new_feature, entry: TaskMemoryEntry,
                    form: str = "stacked") -> float:
    """Similarity between a new identity's feature and a remembered task."""
    x = as_vector(new_feature, "new_feature")
    if form == "centroid":
        return cosine_similarity(x, entry.support_centroid)
    if form != "stacked":
        raise ValueError(f"similarity form must be one of {SIMILARITY_FORMS}")
    support = np.asarray(entry.support_features, dtype=np.float64)
    if support.ndim != 2 or support.shape[1] != x.shape[0]:
        raise ValueError("support features do not match the new feature's dim")
    k = support.shape[0]
    x_norm_sq = float(np.dot(x, x))
    support_norm_sq = float(np.sum(support * support))
    if x_norm_sq == 0.0 or support_norm_sq == 0.0:
        raise ValueError("similarity is undefined for zero-norm features")
    numerator = float(np.sum(support @ x))
    return numerator / (math.sqrt(k * x_norm_sq) * math.sqrt(support_norm_sq))


def init_new_task(memory: Sequence[TaskMemoryEntry], new_feature,
                  meta_head: HeadParams, top_m: int | None = None,
                  form: str = "stacked") -> OnlineState:
    """Head for a newly appearing identity, mixed from similar tasks.

    Only positive similarities participate; their weights are gamma_i / lambda
    with lambda the positive sum, so the result is a convex combination of
    the remembered parameters.  With no positive similarity (or an empty
    memory) the meta-trained head is used unchanged and flagged.
    """
    if top_m is not None and top_m < 1:
        raise ValueError("top_m must be at least 1 when given")
    gammas = [(e.task_id, task_similarity(new_feature, e, form)) for e in memory]
    candidates = list(zip(memory, gammas))
    if top_m is not None and top_m < len(candidates):
        candidates.sort(key=lambda pair: (-pair[1][1], pair[1][0]))
        candidates = candidates[:top_m]
    included = [(e, g) for e, (_, g) in candidates if g > 0.0]
    if not included:
        if memory:
            log.warning("no positively similar task in memory; "
                        "falling back to the shared meta head")
        return OnlineState(head=meta_head, gammas=tuple(gammas), lam=0.0,
                           used_fallback=True)
    # canonical order: the blend must not depend on how the bank was listed
    included.sort(key=lambda pair: pair[0].task_id)
    lam = sum(g for _, g in included)
    flat = np.zeros_like(meta_head.flat())
    weighted_loss = 0.0
    for entry, g in included:
        flat += (g / lam) * entry.params.flat()
        weighted_loss += (g / lam) * entry.adapted_loss
    head = HeadParams.from_flat(flat, meta_head.num_classes, meta_head.feature_dim)
    log.debug("initialized new task from %d entries, lambda=%.4f, "
              "weighted adapted loss=%.4f", len(included), lam, weighted_loss)
    return OnlineState(head=head, gammas=tuple(gammas), lam=lam,
                       weighted_loss=weighted_loss)


def alignment_loss_value(head: HeadParams, pairs) -> float:
    """Mean 1 - cos(logits, target) over (feature, target) pairs."""
    from metatrack.model import head_forward

    if not pairs:
        raise ValueError("need at least one pair")
    total = 0.0
    for feature, target in pairs:
        logits = head_forward(head, feature)
        total += 1.0 - cosine_similarity(logits, target)
    return total / len(pairs)


def online_step(state: OnlineState, pairs: Sequence[tuple], alpha: float) -> OnlineState:
    """One gradient step aligning the head's logits with target embeddings.

    ``pairs`` holds (feature, target) tuples; targets are unit-normalized
    internally and treated as constants.  Zero alpha advances the frame
    counter without touching parameters.
    """
    if alpha < 0:
        raise ValueError("adaptation rate must be non-negative")
    if not pairs:
        return replace(state, frames_seen=state.frames_seen + 1)
    head = state.head
    features = [f for f, _ in pairs]
    targets = [t for _, t in pairs]
    loss_fn = make_alignment_loss(features, targets, head.num_classes,
                                  head.feature_dim)
    theta = head.flat() - alpha * ad.gradient(loss_fn, head.flat())
    new_head = HeadParams.from_flat(theta, head.num_classes, head.feature_dim)
    return replace(state, head=new_head, frames_seen=state.frames_seen + 1)
