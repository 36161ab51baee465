"""Point-to-point ICP refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coarse_align import kabsch_umeyama
from .core import KdIndex, PointCloud, RigidTransform, compose
from .errors import EmptyInput, InsufficientOverlap, ParamError


@dataclass
class IcpParams:
    max_iterations: int = 50
    max_correspondence_dist: float = 0.2
    convergence_tol: float = 1e-6
    min_correspondences: int = 10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ParamError("max_iterations must be >= 1")
        if not self.max_correspondence_dist > 0:
            raise ParamError("max_correspondence_dist must be > 0")
        if not self.convergence_tol > 0:
            raise ParamError("convergence_tol must be > 0")
        if self.min_correspondences < 3:
            raise ParamError("min_correspondences must be >= 3")

    @classmethod
    def for_resolution(cls, voxel_size: float, /, **kw) -> "IcpParams":
        kw.setdefault("max_correspondence_dist", 2.0 * voxel_size)
        return cls(**kw)


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool
    rmse_history: list


def _as_index(source):
    if isinstance(source, KdIndex):
        return source
    pts = source.points if isinstance(source, PointCloud) else source
    if len(pts) == 0:
        raise EmptyInput("source cloud is empty")
    return KdIndex(pts)


def refine(source, target, initial: RigidTransform, params: IcpParams) -> IcpResult:
    """Alternate nearest-source correspondences and closed-form rigid fits.

    ``source`` may be a :class:`KdIndex` built over the source cloud. Each
    pass matches the currently transformed target to the source, drops pairs
    farther than ``max_correspondence_dist`` and stops once the relative RMSE
    change falls below ``convergence_tol``. The reported RMSE belongs to the
    correspondences of the returned transform.
    """
    index = _as_index(source)
    tgt = np.asarray(target.points if isinstance(target, PointCloud) else target, dtype=np.float64)
    if len(tgt) == 0:
        raise EmptyInput("target cloud is empty")
    src = index.points

    current = initial
    history = []
    prev = None
    passes = 0
    while True:
        passes += 1
        moved = current.transform_points(tgt)
        nn, d = index.nearest_one(moved)
        keep = d <= params.max_correspondence_dist
        n_keep = int(keep.sum())
        if n_keep < params.min_correspondences:
            raise InsufficientOverlap(
                f"{n_keep} correspondences within {params.max_correspondence_dist} m, "
                f"need {params.min_correspondences}",
                transform=current, rmse=prev if prev is not None else float("nan"),
                iterations=passes)
        rmse = float(np.sqrt(np.mean(d[keep] ** 2)))
        history.append(rmse)
        if rmse == 0.0 or (prev is not None and abs(prev - rmse) / rmse < params.convergence_tol):
            return IcpResult(current, rmse, passes, True, history)
        if passes >= params.max_iterations:
            return IcpResult(current, rmse, passes, False, history)
        step = kabsch_umeyama(src[nn[keep]], moved[keep])
        current = compose(step, current)
        prev = rmse
