"""SPFH / FPFH descriptors in the Darboux frame of each point pair."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .core import KdIndex, PointCloud
from .errors import DegeneratePair, ParamError
from .io import atomic_write


@dataclass
class FpfhParams:
    radius: float = 1.0
    bins_per_feature: int = 11

    def __post_init__(self):
        if not self.radius > 0:
            raise ParamError("radius must be > 0")
        if self.bins_per_feature < 2:
            raise ParamError("bins_per_feature must be >= 2")

    @classmethod
    def for_resolution(cls, voxel_size: float, /, **kw) -> "FpfhParams":
        kw.setdefault("radius", 10.0 * voxel_size)
        return cls(**kw)

    @property
    def length(self) -> int:
        return 3 * self.bins_per_feature


@dataclass(frozen=True)
class FpfhDescriptor:
    keypoint: int
    histogram: np.ndarray


def darboux_angles(p_i, n_i, p_j, n_j):
    """``(alpha, phi, theta)`` of the pair, with ``v`` normalized before use.

    ``alpha`` and ``phi`` are cosines in [-1, 1]; ``theta`` lies in (-pi, pi].
    """
    p_i, n_i, p_j, n_j = (np.asarray(a, dtype=np.float64) for a in (p_i, n_i, p_j, n_j))
    d = p_j - p_i
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        raise DegeneratePair("coincident points")
    u = n_i
    v = np.cross(d, u)
    vn = np.linalg.norm(v)
    if vn < 1e-9 * dist:
        raise DegeneratePair("displacement parallel to the source normal")
    v = v / vn
    w = np.cross(u, v)
    alpha = float(v @ n_j)
    phi = float(u @ d / dist)
    theta = float(np.arctan2(w @ n_j, u @ n_j))
    if theta <= -np.pi:
        theta = np.pi
    return alpha, phi, theta


def _require_normals(cloud):
    if cloud.normals is None:
        raise ParamError("FPFH needs a cloud with normals")


def spfh_histograms(cloud: PointCloud, centers, params: FpfhParams, index: KdIndex | None = None):
    """SPFH rows ``(len(centers), 3 * bins)`` for the given point indices."""
    _require_normals(cloud)
    pts = np.ascontiguousarray(cloud.points)
    index = index or KdIndex(pts)
    centers = np.ascontiguousarray(centers, dtype=np.int64)
    nbr, ptr, _ = index.radius_csr(pts[centers], params.radius, sort=False)
    return kernels.spfh_batch(pts, np.ascontiguousarray(cloud.normals), centers,
                              nbr, ptr, params.bins_per_feature)


def compute_spfh(cloud: PointCloud, center: int, params: FpfhParams,
                 index: KdIndex | None = None) -> np.ndarray:
    return spfh_histograms(cloud, [center], params, index)[0]


def compute_fpfh(cloud: PointCloud, keypoints, params: FpfhParams,
                 index: KdIndex | None = None) -> list[FpfhDescriptor]:
    """FPFH at each keypoint: own SPFH plus the inverse-distance-weighted mean
    of its radius neighbors' SPFHs (neighbors drawn from the full cloud)."""
    _require_normals(cloud)
    kp = np.array([getattr(k, "index", k) for k in keypoints], dtype=np.int64)
    if len(kp) == 0:
        return []
    pts = np.ascontiguousarray(cloud.points)
    index = index or KdIndex(pts)
    nbr, ptr, dist = index.radius_csr(pts[kp], params.radius, sort=False)
    owner = np.repeat(np.arange(len(kp)), np.diff(ptr))
    use = (nbr != kp[owner]) & (dist >= 1e-12)
    nbr, owner, dist = nbr[use], owner[use], dist[use]

    need = np.unique(np.concatenate([kp, nbr]))
    spfh = spfh_histograms(cloud, need, params, index)
    row = np.searchsorted(need, np.arange(len(pts))) if len(need) else None

    desc = spfh[row[kp]].copy()
    k = np.bincount(owner, minlength=len(kp)).astype(np.float64)
    acc = np.zeros_like(desc)
    np.add.at(acc, owner, spfh[row[nbr]] / dist[:, None])
    has = k > 0
    desc[has] += acc[has] / k[has, None]
    return [FpfhDescriptor(int(i), h) for i, h in zip(kp, desc)]


def descriptor_matrix(descs) -> np.ndarray:
    if not descs:
        return np.zeros((0, 0))
    return np.stack([d.histogram for d in descs])


def dump_descriptors(descs, path):
    """One line per keypoint: ``index d_0 ... d_n`` with 6 significant digits."""
    lines = [" ".join([str(d.keypoint)] + ["%.6g" % v for v in d.histogram]) for d in descs]
    atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
