"""Point-cloud primitives: neighbourhoods, sampling, bounding boxes and rigid motions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PointCloud:
    coords: np.ndarray
    labels: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.coords):
                raise ValueError(
                    f"labels length {len(self.labels)} != point count {len(self.coords)}"
                )
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.coords)

    def copy(self) -> "PointCloud":
        labels = None if self.labels is None else self.labels.copy()
        return PointCloud(self.coords.copy(), labels, self.id)


@dataclass
class RigidTransform:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)

    def is_valid(self, tol: float = 1e-9) -> bool:
        ortho = np.abs(self.R.T @ self.R - np.eye(3)).max() <= tol
        return bool(ortho and abs(np.linalg.det(self.R) - 1.0) <= tol)


@dataclass
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.min - tol) and np.all(p <= self.max + tol))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))


def _as_coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.coords
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def knn(seed_index: int, cloud, k: int) -> np.ndarray:
    """Indices of the ``k`` points closest to the seed (seed included).

    Exhaustive scan; equal distances resolve to the lower index, so the result
    is a pure function of the inputs.
    """
    pts = _as_coords(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    d2 = ((pts - pts[seed_index]) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    return order[:k]


def farthest_point_sample(cloud, m: int, start_index: int = 0) -> np.ndarray:
    pts = _as_coords(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start_index
    mind = ((pts - pts[start_index]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1), out=mind)
    return chosen


def farthest_point_sample_batch(coords: np.ndarray, m: int) -> np.ndarray:
    """Row-wise :func:`farthest_point_sample` on a (B, N, 3) stack, starting at index 0."""
    b, n, _ = coords.shape
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    chosen = np.zeros((b, m), dtype=np.int64)
    rows = np.arange(b)
    # per-axis planes: reductions over a length-3 trailing axis are slow
    x, y, z = (np.ascontiguousarray(coords[..., k]) for k in range(3))
    mind = _sq_dist(x, y, z, x[:, :1], y[:, :1], z[:, :1])
    for i in range(1, m):
        nxt = np.argmax(mind, axis=1)
        chosen[:, i] = nxt
        d = _sq_dist(x, y, z, x[rows, nxt][:, None], y[rows, nxt][:, None], z[rows, nxt][:, None])
        np.minimum(mind, d, out=mind)
    return chosen


def _sq_dist(x, y, z, px, py, pz):
    d = (x - px) ** 2
    d += (y - py) ** 2
    d += (z - pz) ** 2
    return d


def nearest_index(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """For each query row, the index of its nearest reference row (ties -> lower index).

    Accepts (Q, 3)/(R, 3) or batched (B, Q, 3)/(B, R, 3).
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    d2 = _sq_dist(*(q[..., :, None, k] for k in range(3)), *(r[..., None, :, k] for k in range(3)))
    return np.argmin(d2, axis=-1)


def aabb(cloud) -> Aabb:
    pts = _as_coords(cloud)
    if len(pts) == 0:
        raise ValueError("bounding box of an empty cloud")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def quaternion_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    """Random rotation matrix.

    ``max_angle == pi`` draws uniformly over SO(3) through a uniform unit
    quaternion. Smaller values draw a uniform axis and an angle uniform in
    ``[0, max_angle]``.
    """
    if not 0.0 <= max_angle <= np.pi:
        raise ValueError(f"max_angle must be in [0, pi], got {max_angle}")
    if max_angle == 0.0:
        return np.eye(3)
    if max_angle == np.pi:
        u1, u2, u3 = rng.random(3)
        a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
        q = (
            b * np.cos(2 * np.pi * u3),
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
        )
        return quaternion_matrix(q)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    return axis_angle_matrix(axis, rng.uniform(0.0, max_angle))


def apply_rigid(points, xf: RigidTransform) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ xf.R.T + xf.T


def normalize_cloud(coords: np.ndarray) -> np.ndarray:
    """Zero centroid, unit maximum radius."""
    c = coords - coords.mean(axis=0)
    r = np.sqrt((c**2).sum(axis=1)).max()
    return c / r if r > 0 else c
