"""Inlier fraction and inlier RMSE of a registered target against the source."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import KdIndex, PointCloud, RigidTransform
from .errors import EmptyInput, ParamError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class Metrics:
    inlier_fraction: float
    inlier_rmse: float  # nan when there are no inliers
    target_size: int
    threshold: float
    inlier_count: int

    def to_dict(self):
        d = asdict(self)
        if not np.isfinite(self.inlier_rmse):
            d["inlier_rmse"] = None
        return d


def compute_metrics(source, target, t: RigidTransform, threshold: float = DEFAULT_THRESHOLD) -> Metrics:
    """A transformed target point is an inlier when its nearest source point is
    strictly closer than ``threshold``; RMSE is taken over inliers only."""
    if not threshold > 0:
        raise ParamError("threshold must be > 0")
    tgt = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
    if len(tgt) == 0:
        raise EmptyInput("target cloud is empty")
    if isinstance(source, KdIndex):
        index = source
    else:
        src = source.points if isinstance(source, PointCloud) else source
        if len(src) == 0:
            raise EmptyInput("source cloud is empty")
        index = KdIndex(src)
    _, d = index.nearest_one(t.transform_points(tgt))
    inl = d < threshold
    count = int(inl.sum())
    rmse = float(np.sqrt(np.mean(d[inl] ** 2))) if count else float("nan")
    return Metrics(count / len(tgt), rmse, len(tgt), float(threshold), count)
