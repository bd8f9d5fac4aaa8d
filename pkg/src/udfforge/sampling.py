"""Training samples: far-field queries around surfel centers and near-field
plane samples offset along surfel normals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .surfel import Surfel, SurfelCloud

Array = np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    planes_per_batch: int = 500
    roots_per_plane: int = 10
    offsets_per_root: int = 1
    T: float = 0.02
    knn_k: int = 50
    queries_per_center: int = 1
    large_scale_threshold_factor: float = 3.0
    large_scale_root_multiplier: int = 2

    def __post_init__(self):
        for name in ("planes_per_batch", "roots_per_plane", "offsets_per_root", "knn_k",
                     "queries_per_center", "large_scale_root_multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if not self.large_scale_threshold_factor > 0:
            raise ValueError("large_scale_threshold_factor must be > 0")


class QuerySamples(NamedTuple):
    q: Array  # (J, 3)
    source_index: Array  # (J,)


class PlaneSamples(NamedTuple):
    root: Array  # (M, 3)
    point: Array  # (M, 3)
    target: Array  # (M,) unsigned, in [0, T]
    offset: Array  # (M,) signed offset along the normal
    surfel_index: Array  # (M,)

    def __len__(self):
        return len(self.target)


def sample_queries(cloud, sigmas, config: SamplerConfig, rng, indices=None) -> QuerySamples:
    """Gaussian queries around centers, one std per center (its k-NN distance).

    ``indices`` restricts sampling to a subset of centers (the current batch).
    """
    centers = cloud.centers if isinstance(cloud, SurfelCloud) else np.asarray(cloud, dtype=np.float64)
    if len(centers) == 0:
        raise ValueError("cannot sample queries from an empty cloud")
    idx = np.arange(len(centers)) if indices is None else np.asarray(indices)
    src = np.repeat(idx, config.queries_per_center)
    sig = np.asarray(sigmas, dtype=np.float64)[src]
    q = centers[src] + sig[:, None] * rng.normal(size=(len(src), 3))
    return QuerySamples(q, src)


def plane_points(center, rotation, scales, uv) -> Array:
    """Affine map of in-plane coordinates ``uv`` (..., 2) onto a surfel plane:
    ``center + R @ (s0*u, s1*v, 0)``."""
    local = np.asarray(uv) * np.asarray(scales)
    return np.asarray(center) + local[..., 0:1] * rotation[..., :, 0] + local[..., 1:2] * rotation[..., :, 1]


def sample_plane_roots(surfel: Surfel, h: int, rng) -> Array:
    if h < 1:
        raise ValueError("h must be >= 1")
    uv = rng.normal(size=(h, 2))
    return plane_points(surfel.center, np.asarray(surfel.rotation), surfel.scales, uv)


def allocate_roots(cloud: SurfelCloud, config: SamplerConfig) -> Array:
    """Roots per surfel: ``H``, or ``H * multiplier`` for surfels whose largest
    scale exceeds ``factor * mean(largest scales)``."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    smax = cloud.scales.max(axis=1)
    thresh = config.large_scale_threshold_factor * smax.mean()
    big = smax > thresh
    counts = np.full(len(cloud), config.roots_per_plane, dtype=np.int64)
    counts[big] *= config.large_scale_root_multiplier
    return counts


def offsets_to_samples(roots: Array, normals: Array, offsets: Array, surfel_index: Array) -> PlaneSamples:
    """``e = root + o * n / |n|`` with target ``|o|``. Inputs are row-aligned."""
    n = normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    pts = roots + offsets[:, None] * n
    return PlaneSamples(roots, pts, np.abs(offsets), offsets, surfel_index)


def sample_offsets(surfel: Surfel, roots, config: SamplerConfig, rng, surfel_index: int = -1) -> PlaneSamples:
    roots = np.asarray(roots, dtype=np.float64).reshape(-1, 3)
    B = config.offsets_per_root
    r = np.repeat(roots, B, axis=0)
    o = rng.uniform(-config.T, config.T, size=len(r))
    nrm = np.broadcast_to(surfel.normal, r.shape)
    return offsets_to_samples(r, nrm, o, np.full(len(r), surfel_index))


def sample_plane_batch(cloud: SurfelCloud, indices, counts: Array, config: SamplerConfig, rng) -> PlaneSamples:
    """Vectorised roots + offsets for a batch of surfels.

    ``counts`` is the per-surfel root allocation over the whole cloud.
    """
    idx = np.asarray(indices)
    src = np.repeat(idx, counts[idx])
    uv = rng.normal(size=(len(src), 2))
    roots = plane_points(cloud.centers[src], cloud.rotations[src], cloud.scales[src], uv)
    B = config.offsets_per_root
    src = np.repeat(src, B)
    roots = np.repeat(roots, B, axis=0)
    o = rng.uniform(-config.T, config.T, size=len(src))
    return offsets_to_samples(roots, cloud.normals[src], o, src)
