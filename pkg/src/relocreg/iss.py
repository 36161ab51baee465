"""Intrinsic Shape Signatures keypoints.

The scatter matrix is an unnormalized sum over the neighborhood, so
``lambda_threshold`` scales with neighborhood size (and hence with point
density and ``r_salient``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .core import KdIndex, PointCloud, SymMat3, sym_eigen3_batch
from .errors import EmptyInput, NotSalient, ParamError

GATES = ("canonical", "literal")


@dataclass
class IssParams:
    """Keypoint detector settings.

    ``gate="canonical"`` rejects a point when ``lam_mid / lam_max >= gamma21``
    or ``lam_min / lam_mid >= gamma32`` (bounds below 1). ``gate="literal"``
    instead requires ``lam2 / lam1 < gamma21`` and ``lam3 / lam2 < gamma32`` on
    ascending eigenvalues, which needs bounds above 1 to admit anything.
    """

    r_salient: float = 0.6
    d_voxel: float = 0.4
    lambda_threshold: float = 0.0
    gamma21: float = 0.975
    gamma32: float = 0.975
    min_neighbors: int = 5
    gate: str = "canonical"

    def __post_init__(self):
        if not (self.r_salient > 0 and self.d_voxel > 0):
            raise ParamError("r_salient and d_voxel must be > 0")
        if self.lambda_threshold < 0:
            raise ParamError("lambda_threshold must be >= 0")
        if self.min_neighbors < 5:
            raise ParamError("min_neighbors must be >= 5")
        if self.gate not in GATES:
            raise ParamError(f"gate must be one of {GATES}")
        if self.gate == "canonical" and not (0 < self.gamma21 <= 1 and 0 < self.gamma32 <= 1):
            raise ParamError("canonical gate bounds must lie in (0, 1]")
        if self.gate == "literal" and not (self.gamma21 > 0 and self.gamma32 > 0):
            raise ParamError("literal gate bounds must be > 0")

    @classmethod
    def for_resolution(cls, voxel_size: float, /, **kw) -> "IssParams":
        kw.setdefault("r_salient", 6.0 * voxel_size)
        kw.setdefault("d_voxel", 4.0 * voxel_size)
        return cls(**kw)


@dataclass(frozen=True)
class Keypoint:
    index: int
    saliency: float


def scatter_matrix(cloud: PointCloud, center: int, r_salient: float,
                   min_neighbors: int = 1, index: KdIndex | None = None) -> SymMat3:
    """Scatter of the radius neighborhood (center included) about its centroid."""
    if not r_salient > 0:
        raise ParamError("r_salient must be > 0")
    index = index or KdIndex(cloud.points)
    nbr, ptr, _ = index.radius_csr(cloud.points[center], r_salient, sort=False)
    if len(nbr) < min_neighbors:
        raise NotSalient(f"point {center} has {len(nbr)} neighbors, needs {min_neighbors}")
    s = kernels.scatter_batch(np.ascontiguousarray(cloud.points), nbr, ptr)
    return SymMat3(tuple(float(x) for x in s[0]))


RANK_EPS = 1e-10


def passes_gates(lam, params: IssParams) -> np.ndarray:
    """Boolean mask over ``(n, 3)`` ascending eigenvalue triplets.

    A smallest eigenvalue within round-off of zero (``<= RANK_EPS * lambda_max``)
    counts as zero, so flat neighborhoods never pass a zero threshold.
    """
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 3)
    l1, l2, l3 = lam[:, 0], lam[:, 1], lam[:, 2]
    ok = (l1 > params.lambda_threshold) & (l1 > RANK_EPS * l3)
    with np.errstate(divide="ignore", invalid="ignore"):
        if params.gate == "canonical":
            ok &= (l2 / l3 < params.gamma21) & (l1 / l2 < params.gamma32)
        else:
            ok &= (l2 / l1 < params.gamma21) & (l3 / l2 < params.gamma32)
    return ok & np.isfinite(lam).all(axis=1)


def saliency_eigenvalues(cloud: PointCloud, params: IssParams, index: KdIndex | None = None):
    """Ascending scatter eigenvalues per point and a mask of evaluable points."""
    pts = np.ascontiguousarray(cloud.points)
    index = index or KdIndex(pts)
    nbr, ptr, _ = index.radius_csr(pts, params.r_salient, sort=False)
    counts = np.diff(ptr)
    scat = kernels.scatter_batch(pts, nbr, ptr)
    lam, _ = sym_eigen3_batch(scat)
    return lam, counts >= params.min_neighbors


def suppress(points, candidates, saliency, d_voxel):
    """Keep the most salient candidate per ``d_voxel`` cube (lower index on ties)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        return candidates
    keys = np.floor(points[candidates] / d_voxel).astype(np.int64)
    sal = saliency[candidates]
    # group by key, then descending saliency, then ascending index
    order = np.lexsort((candidates, -sal, keys[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(len(order), bool)
    first[1:] = (k[1:] != k[:-1]).any(axis=1)
    return candidates[order[first]]


def detect_keypoints(cloud: PointCloud, params: IssParams,
                     index: KdIndex | None = None) -> list[Keypoint]:
    """ISS keypoints sorted by descending saliency (lowest eigenvalue)."""
    if len(cloud) == 0:
        raise EmptyInput("cannot detect keypoints in an empty cloud")
    lam, evaluable = saliency_eigenvalues(cloud, params, index)
    qualify = np.flatnonzero(evaluable & passes_gates(lam, params))
    sal = lam[:, 0]
    kept = suppress(cloud.points, qualify, sal, params.d_voxel)
    kept = kept[np.lexsort((kept, -sal[kept]))]
    return [Keypoint(int(i), float(sal[i])) for i in kept]
