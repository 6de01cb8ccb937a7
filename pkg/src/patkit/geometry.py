"""Euclidean primitives on raw point clouds.

Distances use the xyz channels only and stay in squared form. Every tie
(nearest neighbours, furthest point) resolves to the lowest point index.
Functions accept a single cloud (N, 3+f) or a batch (B, N, 3+f).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ContractError, FormatError


@dataclass
class PointCloud:
    """N x (3+f) points: xyz followed by f feature channels."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise FormatError(f"point cloud needs shape (N, 3+f), got {pts.shape}")
        if pts.shape[0] < 1:
            raise FormatError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise FormatError("point cloud has non-finite coordinates")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def f(self) -> int:
        return self.points.shape[1] - 3

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


CloudLike = Union[PointCloud, np.ndarray]


@dataclass
class NeighborIndex:
    """Row p lists the K neighbours chosen for point p (never p itself)."""

    indices: np.ndarray
    k: int
    pool: int


def _points(cloud: CloudLike) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)


def _xyz(cloud: CloudLike) -> np.ndarray:
    return _points(cloud)[..., :3].astype(np.float64)


def pairwise_sq_dist(cloud: CloudLike) -> np.ndarray:
    """D[i, j] = |xyz_i - xyz_j|^2, computed from explicit differences."""
    xyz = _xyz(cloud)
    out = np.zeros(xyz.shape[:-1] + xyz.shape[-2:-1])
    for k in range(3):
        col = xyz[..., k]
        diff = col[..., :, None] - col[..., None, :]
        out += diff * diff
    return out


def _neighbor_order(cloud: CloudLike, depth: int) -> np.ndarray:
    """First ``depth`` neighbours of each point sorted by (distance, index)."""
    d = pairwise_sq_dist(cloud)
    n = d.shape[-1]
    diag = np.arange(n)
    d[..., diag, diag] = np.inf
    if depth >= n - 1:
        return np.argsort(d, axis=-1, kind="stable")[..., :depth]
    part = np.argpartition(d, depth - 1, axis=-1)[..., :depth]
    vals = np.take_along_axis(d, part, axis=-1)
    # a tie straddling the cut could drop a lower index; redo those rows stably
    cut = vals.max(axis=-1, keepdims=True)
    tied = (d <= cut).sum(axis=-1) > depth
    if tied.any():
        part[tied] = np.argsort(d[tied], axis=-1, kind="stable")[..., :depth]
        vals[tied] = np.take_along_axis(d[tied], part[tied], axis=-1)
    order = np.lexsort((part, vals), axis=-1)
    return np.take_along_axis(part, order, axis=-1)


def knn(cloud: CloudLike, k: int) -> NeighborIndex:
    n = _points(cloud).shape[-2]
    if not 1 <= k <= n - 1:
        raise ContractError(f"knn needs 1 <= k <= N-1, got k={k}, N={n}")
    return NeighborIndex(_neighbor_order(cloud, k), k, k)


def dilated_pool(n: int, k: int, d0: float, n0: int) -> int:
    """Candidate pool size floor(k * max(d0 * n / n0, 1)), capped at n - 1."""
    d_eff = max(d0 * n / n0, 1.0)
    return min(int(math.floor(k * d_eff + 1e-9)), n - 1)


def dilated_neighbor_sample(
    cloud: CloudLike,
    k: int,
    d0: float,
    n0: int,
    rng: Optional[np.random.Generator] = None,
) -> NeighborIndex:
    """Sample k distinct neighbours per point from its dilated candidate pool.

    With ``rng=None`` the pool is truncated to the exact top-k (the
    deterministic inference path). Chosen neighbours are kept in distance
    order.
    """
    n = _points(cloud).shape[-2]
    if not 1 <= k <= n - 1:
        raise ContractError(f"neighbour sampling needs 1 <= k <= N-1, got k={k}, N={n}")
    pool = dilated_pool(n, k, d0, n0)
    order = _neighbor_order(cloud, pool)
    if rng is None or pool == k:
        return NeighborIndex(order[..., :k], k, pool)
    ranks = np.sort(np.argsort(rng.random(order.shape), axis=-1)[..., :k], axis=-1)
    return NeighborIndex(np.take_along_axis(order, ranks, axis=-1), k, pool)


def position_set(cloud: CloudLike, neighbors: Union[NeighborIndex, np.ndarray]) -> np.ndarray:
    """Pairs (x_p, x_i - x_p) over all 3+f channels: shape (..., N, K, 2(3+f))."""
    pts = _points(cloud)
    idx = neighbors.indices if isinstance(neighbors, NeighborIndex) else np.asarray(neighbors)
    if pts.ndim == 2:
        nbr = pts[idx]
    else:
        b = np.arange(pts.shape[0])[:, None, None]
        nbr = pts[b, idx]
    center = np.broadcast_to(pts[..., :, None, :], nbr.shape)
    return np.concatenate([center, nbr - center], axis=-1)


def fps(cloud: CloudLike, n_out: int, start_index: int = 0) -> np.ndarray:
    """Greedy furthest point sampling in xyz space.

    Each step adds the unselected point whose squared distance to the
    selected set is largest. Returns indices of shape (n_out,) or
    (B, n_out) for a batch.
    """
    xyz = _xyz(cloud)
    single = xyz.ndim == 2
    if single:
        xyz = xyz[None]
    b, n, _ = xyz.shape
    if not 1 <= n_out <= n:
        raise ContractError(f"fps needs 1 <= n_out <= N, got n_out={n_out}, N={n}")
    if not 0 <= start_index < n:
        raise ContractError(f"start index {start_index} outside [0, {n})")
    rows = np.arange(b)
    out = np.empty((b, n_out), dtype=np.int64)
    out[:, 0] = start_index
    current = np.full(b, start_index)
    min_d = np.full((b, n), np.inf)
    chosen = np.zeros((b, n), dtype=bool)
    chosen[rows, current] = True
    for i in range(1, n_out):
        diff = xyz - xyz[rows, current][:, None, :]
        min_d = np.minimum(min_d, (diff * diff).sum(axis=-1))
        masked = np.where(chosen, -1.0, min_d)
        current = np.argmax(masked, axis=1)
        chosen[rows, current] = True
        out[:, i] = current
    return out[0] if single else out
