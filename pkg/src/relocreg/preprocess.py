"""Denoising, voxel downsampling and normal estimation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import KdIndex, PointCloud, pack_sym, sym_eigen3_batch
from .errors import ParamError


@dataclass
class PreprocessParams:
    voxel_size: float = 0.1
    sor_k: int = 16
    sor_std_mult: float = 2.0
    normal_k: int = 20
    # "centroid" orients normals toward the cloud centroid, which moves with
    # the cloud under rigid motion; None uses the largest-component rule
    normal_viewpoint: Optional[object] = "centroid"

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ParamError("voxel_size must be > 0")
        if self.sor_k < 1:
            raise ParamError("sor_k must be >= 1")
        if not self.sor_std_mult > 0:
            raise ParamError("sor_std_mult must be > 0")
        if self.normal_k < 3:
            raise ParamError("normal_k must be >= 3")


def voxel_keys(points, size):
    return np.floor(np.asarray(points) / size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Output is ordered by voxel key, z-major then y then x. Normals are not
    carried over.
    """
    if not voxel_size > 0:
        raise ParamError("voxel_size must be > 0")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = voxel_keys(cloud.points, voxel_size)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, cloud.points)
    cent = sums / counts[:, None]
    order = np.lexsort((uniq[:, 0], uniq[:, 1], uniq[:, 2]))
    return PointCloud(cent[order])


def knn_mean_distances(points, k, index=None):
    """Mean distance from each point to its ``k`` nearest other points."""
    index = index or KdIndex(points)
    idx, d = index.knn(points, k + 1)
    own = idx == np.arange(len(points))[:, None]
    # drop the point itself; if ties at distance 0 pushed it out, drop the last column
    missing = ~own.any(axis=1)
    own[missing, -1] = True
    return d[~own].reshape(len(points), k).mean(axis=1)


def remove_statistical_outliers(cloud: PointCloud, k: int = 16, std_mult: float = 2.0):
    """Drop points whose mean k-NN distance exceeds ``mu + std_mult * sigma``.

    ``mu`` and ``sigma`` (population standard deviation) are taken over all
    points. Returns ``(kept_cloud, removed_indices)``; survivors keep their order.
    """
    if k < 1 or not std_mult > 0:
        raise ParamError("need k >= 1 and std_mult > 0")
    if len(cloud) <= k:
        raise ParamError(f"cloud has {len(cloud)} points, needs more than k={k}")
    md = knn_mean_distances(cloud.points, k)
    limit = md.mean() + std_mult * md.std()
    removed = np.flatnonzero(md > limit)
    keep = np.ones(len(cloud), bool)
    keep[removed] = False
    return cloud.select(np.flatnonzero(keep)), removed


def estimate_normals(cloud: PointCloud, k: int = 20, viewpoint=None, index=None) -> PointCloud:
    """Unit normals from the smallest-eigenvalue direction of each k-NN covariance.

    With ``viewpoint`` the normal is flipped to face it; ``"centroid"`` uses the
    cloud's own centroid. Without one, the largest-magnitude component is made
    positive.
    """
    n = len(cloud)
    if k < 3:
        raise ParamError("k must be >= 3")
    if n < k:
        raise ParamError(f"cloud has {n} points, needs at least k={k}")
    pts = cloud.points
    index = index or KdIndex(pts)
    idx, _ = index.knn(pts, k)
    nb = pts[idx]
    dev = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", dev, dev) / k
    _, vecs = sym_eigen3_batch(pack_sym(cov))
    normals = vecs[:, :, 0].copy()
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    if isinstance(viewpoint, str):
        if viewpoint != "centroid":
            raise ParamError(f"unknown viewpoint {viewpoint!r}")
        viewpoint = pts.mean(axis=0)
    if viewpoint is not None:
        vp = np.asarray(viewpoint, dtype=np.float64)
        flip = np.einsum("ni,ni->n", normals, vp - pts) < 0
    else:
        big = np.argmax(np.abs(normals), axis=1)
        flip = normals[np.arange(n), big] < 0
    normals[flip] *= -1.0
    return PointCloud(pts, normals)
