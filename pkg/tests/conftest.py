"""Shared builders for synthetic task distributions."""

import numpy as np
import pytest

from metatrack.episodes import build_tasks
from metatrack.model import LabeledSample


def orthonormal_directions(num, dim, rng):
    """Rows of a random orthonormal frame (num <= dim)."""
    assert num <= dim
    m = rng.normal(0, 1, (dim, dim))
    q, _ = np.linalg.qr(m)
    return q[:num]


def separable_distribution(num_identities=6, dim=6, support=3, query=2,
                           noise=0.05, seed=0, sequence="train"):
    """Tasks whose identities sit on well-separated unit directions."""
    rng = np.random.default_rng(seed)
    dirs = orthonormal_directions(num_identities, dim, rng)
    samples = []
    for ident in range(num_identities):
        for frame in range(1, support + query + 1):
            feat = dirs[ident] + rng.normal(0, noise, dim)
            samples.append(
                LabeledSample(feat, ident, frame=frame, sequence=sequence)
            )
    return build_tasks(samples, support, query)


@pytest.fixture
def small_separable():
    return separable_distribution()
