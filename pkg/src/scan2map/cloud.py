"""Point clouds, nearest-neighbour search and the basic cloud filters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyIndexError, InsufficientPointsError, InvalidArgumentError
from .rng import Rng
from .se3 import Pose

DEFAULT_NORMAL_K = 10


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class PointCloud:
    """Immutable (N, 3) points with optional unit normals."""

    __slots__ = ("points", "normals")

    def __init__(self, points: np.ndarray, normals: np.ndarray | None = None, *, check: bool = True) -> None:
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must have shape (N, 3), got {pts.shape}")
        if check and not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point coordinates must be finite")
        nrm = None
        if normals is not None:
            nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise InvalidArgumentError("normals must match points in shape")
            if check and len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise InvalidArgumentError("normals must be unit length")
            nrm = _readonly(nrm)
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "normals", nrm)

    def __setattr__(self, name, value):
        raise AttributeError("PointCloud is immutable")

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, normals={self.normals is not None})"

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, selector: np.ndarray) -> "PointCloud":
        nrm = None if self.normals is None else self.normals[selector]
        return PointCloud(self.points[selector], nrm, check=False)

    def transformed(self, pose: Pose) -> "PointCloud":
        nrm = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), nrm, check=False)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points, check=False)

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals)

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        if all(c.normals is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.normals for c in clouds]), check=False)
        return PointCloud(pts, check=False)


class SpatialIndex:
    """k-d tree over a cloud's points.

    Nearest-neighbour answers match a linear scan exactly: squared distances
    are recomputed as sum((p - q)**2) and ties go to the lowest point index.
    """

    def __init__(self, cloud: PointCloud | np.ndarray) -> None:
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        self.points = _readonly(pts.reshape(-1, 3))
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def _require(self) -> cKDTree:
        if self._tree is None:
            raise EmptyIndexError("spatial index is empty")
        return self._tree

    def query(self, queries: np.ndarray, max_distance: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point index and distance for each row of ``queries``.

        With ``max_distance``, rows with no point within that distance get
        index -1 and distance inf.
        """
        best_idx, best_d2, _ = self._nearest(queries, max_distance)
        return best_idx, np.sqrt(best_d2)

    def _nearest(self, queries, max_distance):
        """Exact nearest index, its squared distance, and a lower bound on every other point's distance."""
        tree = self._require()
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0), np.zeros(0)
        k = min(2, len(self.points))
        # pad the bound so points exactly at max_distance are not lost to rounding
        bound = np.inf if max_distance is None else max_distance * (1.0 + 1e-9) + 1e-12
        _, idx = tree.query(q, k=k, distance_upper_bound=bound)
        idx = idx.reshape(len(q), k)
        missing = idx == len(self.points)
        idx_safe = np.where(missing, 0, idx)
        d2 = np.sum((self.points[idx_safe] - q[:, None, :]) ** 2, axis=2)
        d2[missing] = np.inf
        best = np.where(d2[:, 0] <= d2[:, -1], 0, k - 1)
        rows = np.arange(len(q))
        best_idx = idx_safe[rows, best]
        best_d2 = d2[rows, best]
        if k > 1:
            runner_up = np.sqrt(d2[rows, 1 - best])
            if max_distance is not None:
                # anything the tree cut off lies beyond the bound
                runner_up = np.minimum(runner_up, max_distance)
            tied = np.flatnonzero((d2[:, 0] == d2[:, 1]) & np.isfinite(d2[:, 0]))
            for r in tied:
                best_idx[r], best_d2[r] = self._resolve_tie(q[r], best_d2[r])
        else:
            runner_up = np.full(len(q), np.inf if max_distance is None else float(max_distance))
        best_idx = np.where(np.isfinite(best_d2), best_idx, -1)
        return best_idx.astype(np.intp), best_d2, runner_up

    def _resolve_tie(self, q: np.ndarray, d2: float) -> tuple[int, float]:
        radius = np.sqrt(d2) * (1.0 + 1e-9) + 1e-12
        cand = np.asarray(self._tree.query_ball_point(q, radius), dtype=np.intp)
        cd2 = np.sum((self.points[cand] - q) ** 2, axis=1)
        m = cd2.min()
        return int(cand[cd2 == m].min()), float(m)

    def nearest(self, q: np.ndarray) -> tuple[int, float]:
        idx, dist = self.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        tree = self._require()
        d, i = tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3), k=k)
        return i.reshape(-1, k), d.reshape(-1, k)

    def within(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Sorted indices of points with distance <= radius from ``center``."""
        tree = self._require()
        center = np.asarray(center, dtype=np.float64).reshape(3)
        # padded so boundary points survive tree rounding; the exact test below decides
        padded = radius * (1.0 + 1e-9) + 1e-12
        idx = np.asarray(tree.query_ball_point(center, padded), dtype=np.intp)
        idx.sort()
        # same arithmetic as radius_crop
        d2 = np.sum((self.points[idx] - center) ** 2, axis=1)
        return idx[d2 <= radius * radius]


class NearestTracker:
    """Repeated nearest-neighbour queries for a point set that moves a little between calls.

    Answers equal ``index.query(points, max_distance)``. A row keeps its
    previous neighbour without a tree search while it has moved less than
    half the gap between its nearest and second-nearest distances at the
    last search, since that neighbour is then still the unique nearest.
    """

    MARGIN = 1e-9

    def __init__(self, index: SpatialIndex, max_distance: float | None = None) -> None:
        self.index = index
        self.max_distance = max_distance
        self._anchor: np.ndarray | None = None
        self._nearest = np.zeros(0, dtype=np.intp)
        self._gap = np.zeros(0)
        self.searched = 0

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._anchor is None or len(self._anchor) != len(q):
            self._anchor = q.copy()
            self._nearest = np.full(len(q), -1, dtype=np.intp)
            self._gap = np.full(len(q), -np.inf)
            stale = np.ones(len(q), dtype=bool)
        else:
            shift = np.sqrt(np.sum((q - self._anchor) ** 2, axis=1))
            stale = ~(2.0 * shift + self.MARGIN < self._gap)
        rows = np.flatnonzero(stale)
        d2 = np.empty(len(q))
        if len(rows):
            idx, row_d2, runner_up = self.index._nearest(q[rows], self.max_distance)
            self._anchor[rows] = q[rows]
            self._nearest[rows] = idx
            found = np.isfinite(row_d2)
            self._gap[rows] = np.where(found, runner_up - np.sqrt(np.where(found, row_d2, 0.0)), -np.inf)
            d2[rows] = row_d2
            self.searched += len(rows)
        kept = np.flatnonzero(~stale)
        if len(kept):
            # same arithmetic as SpatialIndex.query
            d2[kept] = np.sum((self.index.points[self._nearest[kept]] - q[kept]) ** 2, axis=1)
        return self._nearest.copy(), np.sqrt(d2)


def nearest_neighbor(index: SpatialIndex, q: np.ndarray) -> tuple[int, float]:
    return index.nearest(q)


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    """Integer voxel coordinates; cell i covers [i*v, (i+1)*v)."""
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel key.

    Normals are not carried through; re-estimate them on the result.
    """
    if not voxel > 0:
        raise InvalidArgumentError(f"voxel size must be > 0, got {voxel}")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = voxel_keys(cloud.points, voxel)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None], check=False)


def radius_crop(cloud: PointCloud, center: np.ndarray, radius: float, index: SpatialIndex | None = None) -> PointCloud:
    """Points within ``radius`` of ``center``, input order preserved."""
    if not radius > 0:
        raise InvalidArgumentError(f"radius must be > 0, got {radius}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if len(cloud) == 0:
        return cloud
    if index is not None:
        return cloud.subset(index.within(center, radius))
    d2 = np.sum((cloud.points - center) ** 2, axis=1)
    return cloud.subset(d2 <= radius * radius)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise InvalidArgumentError(f"noise sigma must be >= 0, got {self.sigma}")


def add_noise(cloud: PointCloud, spec: NoiseSpec, rng: Rng | None = None) -> PointCloud:
    """Independent N(0, sigma^2) on every coordinate. Normals are dropped."""
    if rng is None:
        rng = Rng(spec.seed)
    z = rng.normal(3 * len(cloud)).reshape(-1, 3)
    return PointCloud(cloud.points + spec.sigma * z, check=False)


def estimate_normals(
    cloud: PointCloud,
    k: int = DEFAULT_NORMAL_K,
    viewpoint: np.ndarray = (0.0, 0.0, 0.0),
    index: SpatialIndex | None = None,
) -> PointCloud:
    """PCA normals over each point and its k nearest neighbours.

    Each normal is the smallest-eigenvalue eigenvector of the neighbourhood
    covariance, flipped to face ``viewpoint``.
    """
    if k < 3:
        raise InvalidArgumentError(f"k must be >= 3, got {k}")
    n = len(cloud)
    if n < k + 1:
        raise InsufficientPointsError(f"normal estimation needs at least {k + 1} points, got {n}")
    index = index or SpatialIndex(cloud)
    nbr, _ = index.knn(cloud.points, k + 1)
    normals = np.empty((n, 3))
    # chunked to bound the (chunk, k+1, 3) temporaries
    for start in range(0, n, 65536):
        sl = slice(start, min(n, start + 65536))
        nb = cloud.points[nbr[sl]]
        centered = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
        _, vecs = np.linalg.eigh(cov)
        normals[sl] = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    to_view = np.asarray(viewpoint, dtype=np.float64).reshape(3) - cloud.points
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    return PointCloud(cloud.points, normals, check=False)
