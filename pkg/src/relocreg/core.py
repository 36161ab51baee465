"""Geometric primitives shared by every registration stage.

Conventions used throughout the package:

* lengths are meters and distances Euclidean;
* a :class:`RigidTransform` estimated by registration maps *target-frame*
  points into the *source* frame;
* ``compose(a, b)`` applies ``b`` first, then ``a``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._backend import kernels
from .errors import EmptyInput, ParamError

ORTHO_TOL = 1e-9
NORMAL_TOL = 1e-6


def _as_points(a, name="points"):
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ParamError(f"{name} must have shape (n, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with optional unit normals (both ``(n, 3)`` float64)."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.isfinite(pts).all():
            raise ParamError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if len(nrm) != len(pts):
                raise ParamError("normals and points differ in length")
            if len(nrm) and np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > NORMAL_TOL:
                raise ParamError("normals must be unit length")
            nrm.flags.writeable = False
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points)


# --------------------------------------------------------------------------
# SO(3) / SE(3)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def exp_so3(rotvec) -> np.ndarray:
    """Rodrigues' formula: rotation vector (radians) to rotation matrix."""
    w = np.asarray(rotvec, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-8:
        # second-order series keeps small steps orthonormal to ~1e-16
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def rotation_angle(rotation) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    r = np.asarray(rotation)
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(s, c))


def axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return exp_so3(axis / np.linalg.norm(axis) * angle)


def rot_x(deg):
    return axis_angle([1.0, 0.0, 0.0], np.radians(deg))


def rot_y(deg):
    return axis_angle([0.0, 1.0, 0.0], np.radians(deg))


def rot_z(deg):
    return axis_angle([0.0, 0.0, 1.0], np.radians(deg))


def nearest_rotation(m) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _ortho_error(r):
    return max(np.abs(r @ r.T - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64, copy=True).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ParamError("transform entries must be finite")
        if _ortho_error(r) > ORTHO_TOL:
            raise ParamError("rotation is not orthonormal with det +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(exp_so3(rotvec), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform_points(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def _clean_rotation(r):
    return nearest_rotation(r) if _ortho_error(r) > ORTHO_TOL else r


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` and then ``a``."""
    r = _clean_rotation(a.rotation @ b.rotation)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def apply(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    pts = t.transform_points(cloud.points)
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ t.rotation.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


# --------------------------------------------------------------------------
# symmetric 3x3 matrices


@dataclass(frozen=True)
class SymMat3:
    """Symmetric 3x3 matrix stored as ``(xx, xy, xz, yy, yz, zz)``."""

    entries: tuple

    @classmethod
    def from_matrix(cls, m) -> "SymMat3":
        m = np.asarray(m, dtype=np.float64)
        return cls((m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]))

    def to_matrix(self) -> np.ndarray:
        xx, xy, xz, yy, yz, zz = self.entries
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]], dtype=np.float64)


def pack_sym(m) -> np.ndarray:
    """``(..., 3, 3)`` symmetric matrices to ``(..., 6)`` packed entries."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 0, 0], m[..., 0, 1], m[..., 0, 2],
                     m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]], axis=-1)


def unpack_sym(m6) -> np.ndarray:
    m6 = np.asarray(m6, dtype=np.float64)
    xx, xy, xz, yy, yz, zz = np.moveaxis(m6, -1, 0)
    return np.stack([np.stack([xx, xy, xz], -1),
                     np.stack([xy, yy, yz], -1),
                     np.stack([xz, yz, zz], -1)], -2)


def sym_eigen3(m):
    """Eigenvalues (ascending) and eigenvectors (as columns) of one symmetric 3x3.

    Accepts a :class:`SymMat3`, a packed 6-vector or a full 3x3 array whose
    upper triangle is used. Closed form with a Jacobi sweep fallback when all
    three eigenvalues coincide to ~1e-12 relative.
    """
    if isinstance(m, SymMat3):
        m6 = np.array(m.entries, dtype=np.float64)
    else:
        m = np.asarray(m, dtype=np.float64)
        m6 = m if m.shape == (6,) else pack_sym(m)
    if not np.isfinite(m6).all():
        raise ParamError("matrix entries must be finite")
    w, v = kernels.sym_eigen3_batch(np.ascontiguousarray(m6.reshape(1, 6)))
    return w[0], v[0]


def sym_eigen3_batch(m6):
    """Vectorized :func:`sym_eigen3` over ``(n, 6)`` packed matrices."""
    m6 = np.ascontiguousarray(m6, dtype=np.float64).reshape(-1, 6)
    return kernels.sym_eigen3_batch(m6)


# --------------------------------------------------------------------------
# spatial index


def _dist(points, idx, q):
    diff = points[idx] - q
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


class KdIndex:
    """Immutable kd-tree over a point set.

    Backed by :class:`scipy.spatial.cKDTree`; results are re-ranked with a
    single distance formula so that ties resolve to the lower point index.
    """

    def __init__(self, points):
        pts = _as_points(points)
        if len(pts) == 0:
            raise EmptyInput("cannot index an empty cloud")
        pts.flags.writeable = False
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def knn(self, queries, k: int):
        """Batched k nearest neighbors: ``(indices, distances)`` of shape ``(m, k')``.

        ``k'`` is ``min(k, len(self))``; rows ascend by distance, ties by index.
        """
        if k < 1:
            raise ParamError("k must be >= 1")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        kk = min(k, n)
        extra = kk + 1 if kk < n else kk
        _, idx = self._tree.query(q, k=extra)
        idx = idx.reshape(len(q), extra)
        d = _dist(self.points, idx, q[:, None, :])
        order = _rowwise_order(d, idx)
        idx = np.take_along_axis(idx, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        if extra > kk:
            tied = np.flatnonzero(d[:, kk - 1] == d[:, kk])
            for row in tied:
                cand = np.asarray(self._tree.query_ball_point(q[row], d[row, kk - 1] * (1 + 1e-12) + 1e-300))
                cd = _dist(self.points, cand, q[row])
                keep = cd <= d[row, kk - 1]
                cand, cd = cand[keep], cd[keep]
                o = np.lexsort((cand, cd))[:kk]
                idx[row, :kk] = cand[o]
                d[row, :kk] = cd[o]
            idx, d = idx[:, :kk], d[:, :kk]
        return idx, d

    def radius_csr(self, queries, r: float, sort: bool = True):
        """All points within ``r`` of each query as CSR ``(indices, offsets, distances)``.

        Each row is sorted by distance, ties by index; with ``sort=False`` rows
        are in ascending index order instead (cheaper, and just as
        deterministic for order-insensitive consumers).
        """
        if not r > 0:
            raise ParamError("radius must be positive")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        lists = self._tree.query_ball_point(q, r * (1.0 + 1e-12), return_sorted=True)
        counts = np.fromiter(map(len, lists), dtype=np.int64, count=len(q))
        total = int(counts.sum())
        if total == 0:
            return np.zeros(0, np.int64), np.zeros(len(q) + 1, np.int64), np.zeros(0)
        idx = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=total)
        owner = np.repeat(np.arange(len(q)), counts)
        d = _dist(self.points, idx, q[owner])
        keep = d <= r
        if not keep.all():
            idx, owner, d = idx[keep], owner[keep], d[keep]
        if sort:
            order = np.lexsort((idx, d, owner))
            idx, owner, d = idx[order], owner[order], d[order]
        ptr = np.zeros(len(q) + 1, dtype=np.int64)
        np.cumsum(np.bincount(owner, minlength=len(q)), out=ptr[1:])
        return idx, ptr, d

    def nearest_one(self, queries):
        """Fast single nearest neighbor for bulk correspondence search."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        idx, d = self.knn(q, 1)
        return idx[:, 0], d[:, 0]


def _rowwise_order(d, idx):
    # sort each row by (distance, index)
    order = np.argsort(idx, axis=1, kind="stable")
    d2 = np.take_along_axis(d, order, axis=1)
    o2 = np.argsort(d2, axis=1, kind="stable")
    return np.take_along_axis(order, o2, axis=1)


def build_index(cloud) -> KdIndex:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return KdIndex(pts)


def nearest(index: KdIndex, query: Sequence[float], k: int = 1):
    """The ``k`` nearest indexed points as ``[(index, distance), ...]``."""
    idx, d = index.knn(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
    return [(int(i), float(x)) for i, x in zip(idx[0], d[0])]


def radius_search(index: KdIndex, query: Sequence[float], r: float):
    """Indexed points within ``r`` (inclusive) as ``[(index, distance), ...]``."""
    idx, ptr, d = index.radius_csr(np.asarray(query, dtype=np.float64).reshape(1, 3), r)
    return [(int(i), float(x)) for i, x in zip(idx, d)]
