"""Local radius filtering and global statistical filtering of instance clouds.

The local filter keeps a pseudo point only when it lies within
``lam * |anchor - origin|`` of its nearest real point (the anchor), so the
admissible radius grows with range. The global filter drops points whose mean
distance to their ``k_neighbors`` nearest neighbours exceeds
``mean + alpha * std`` of that statistic over the instance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .fusion import InstanceCloud

log = logging.getLogger(__name__)

# relative slack on the statistical threshold so that mathematically equal
# mean distances are not split by rounding
THRESHOLD_RTOL = 1e-12


@dataclass(frozen=True)
class FilterParams:
    lam: float = 0.01
    k_neighbors: int = 16
    alpha: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if int(self.k_neighbors) != self.k_neighbors or self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be an integer >= 1, got {self.k_neighbors}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True, eq=False)
class FusedSet:
    """Output of the local filter: real points first, then surviving pseudo points."""
    points: np.ndarray
    n_real: int
    kept_pseudo: np.ndarray    # bool mask over the input pseudo points
    anchored: bool = True


def nearest_anchor(real: np.ndarray, pseudo: np.ndarray) -> np.ndarray:
    """Index of the nearest real point for every pseudo point, ties to the lowest index."""
    if len(pseudo) == 0:
        return np.zeros(0, dtype=np.int64)
    if len(real) == 1:
        return np.zeros(len(pseudo), dtype=np.int64)
    tree = cKDTree(real)
    d, idx = tree.query(pseudo, k=2)
    idx = idx[:, 0].astype(np.int64)
    for row in np.flatnonzero(d[:, 1] == d[:, 0]):
        # equal distances: fall back to a full scan so the lowest index wins
        dist = np.sqrt(((real - pseudo[row]) ** 2).sum(axis=1))
        idx[row] = int(np.argmin(dist))
    return idx


def local_radius_mask(real: np.ndarray, pseudo: np.ndarray, lam: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Boolean keep-mask over ``pseudo``; requires at least one real point."""
    real = np.asarray(real, dtype=np.float64).reshape(-1, 3)
    pseudo = np.asarray(pseudo, dtype=np.float64).reshape(-1, 3)
    if len(real) == 0:
        raise ValueError("local radius filtering needs at least one real point")
    anchor = real[nearest_anchor(real, pseudo)]
    dist = np.sqrt(((pseudo - anchor) ** 2).sum(axis=1))
    radius = lam * np.sqrt(((anchor - np.asarray(origin, dtype=np.float64)) ** 2).sum(axis=1))
    return dist <= radius


def local_radius_filter(cloud: InstanceCloud, params: FilterParams, origin=(0.0, 0.0, 0.0),
                        keep_unanchored: bool = False) -> FusedSet:
    real = np.asarray(cloud.real, dtype=np.float64).reshape(-1, 3)
    pseudo = np.asarray(cloud.pseudo, dtype=np.float64).reshape(-1, 3)
    if len(real) == 0:
        log.info("instance %s has no real points (unanchored, %s)", cloud.key,
                 "kept" if keep_unanchored else "dropped")
        keep = np.full(len(pseudo), keep_unanchored)
        return FusedSet(pseudo[keep], 0, keep, anchored=False)
    keep = local_radius_mask(real, pseudo, params.lam, origin)
    return FusedSet(np.vstack([real, pseudo[keep]]), len(real), keep)


def knn_mean_distance(points: np.ndarray, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``k`` nearest other points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    # distances recomputed directly so results do not depend on tree arithmetic
    d = np.sqrt(((pts[idx] - pts[:, None, :]) ** 2).sum(axis=2))
    d.sort(axis=1)
    return d[:, 1:].mean(axis=1)


def global_statistical_mask(points, params: FilterParams) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n <= params.k_neighbors:
        return np.ones(n, dtype=bool)
    mean_d = knn_mean_distance(pts, params.k_neighbors)
    mu = mean_d.mean()
    sigma = mean_d.std()
    return mean_d <= mu + params.alpha * sigma + THRESHOLD_RTOL * mu


def global_statistical_filter(points, params: FilterParams) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts[global_statistical_mask(pts, params)]
