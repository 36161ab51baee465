"""Normal Distributions Transform: per-voxel Gaussians of the source cloud and
gradient ascent of the target's log-likelihood under them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .core import PointCloud, RigidTransform, compose, exp_so3, pack_sym, sym_eigen3_batch
from .errors import EmptyInput, GridEmpty, ParamError

LOG_2PI = np.log(2.0 * np.pi)
_KEY_BIAS = 1 << 20


@dataclass
class NdtParams:
    voxel_size: float = 0.4
    min_points: int = 6
    max_iterations: int = 50
    step_init: float = 0.1
    convergence_tol: float = 1e-4
    eps_rel: float = 1e-3

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ParamError("voxel_size must be > 0")
        if self.min_points < 2:
            raise ParamError("min_points must be >= 2")
        if self.max_iterations < 0:
            raise ParamError("max_iterations must be >= 0")
        if not (self.step_init > 0 and self.convergence_tol > 0):
            raise ParamError("step_init and convergence_tol must be > 0")
        if not 0 < self.eps_rel < 1:
            raise ParamError("eps_rel must lie in (0, 1)")

    @classmethod
    def for_resolution(cls, voxel_size: float, /, **kw) -> "NdtParams":
        kw.setdefault("voxel_size", 4.0 * voxel_size)
        return cls(**kw)


def _encode(keys):
    k = keys + _KEY_BIAS
    ok = ((k >= 0) & (k < 2 * _KEY_BIAS)).all(axis=1)
    code = (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]
    return np.where(ok, code, -1)


@dataclass
class NdtGrid:
    """Immutable voxel map; row ``i`` of each array describes one stored voxel."""

    voxel_size: float
    keys: np.ndarray          # (V, 3) integer voxel keys, sorted by code
    means: np.ndarray         # (V, 3)
    covariances: np.ndarray   # (V, 6) packed, conditioned
    inv_covariances: np.ndarray  # (V, 6) packed
    log_norm: np.ndarray      # (V,) log of the Gaussian normalizer
    counts: np.ndarray        # (V,)
    _codes: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self._codes is None:
            self._codes = _encode(self.keys)

    def __len__(self):
        return len(self.means)

    def lookup(self, points) -> np.ndarray:
        """Stored-voxel row of each point, ``-1`` where the voxel is absent."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        with np.errstate(invalid="ignore", over="ignore"):
            scaled = np.floor(pts / self.voxel_size)
        inside = np.isfinite(scaled).all(axis=1) & (np.abs(scaled) < _KEY_BIAS).all(axis=1)
        keys = np.where(inside[:, None], scaled, 0).astype(np.int64)
        code = _encode(keys)
        pos = np.searchsorted(self._codes, code)
        pos = np.minimum(pos, len(self._codes) - 1)
        found = inside & (self._codes[pos] == code)
        return np.where(found, pos, -1).astype(np.int64)

    def voxel(self, row):
        return {
            "key": tuple(int(k) for k in self.keys[row]),
            "mean": self.means[row],
            "covariance": self.covariances[row],
            "count": int(self.counts[row]),
        }


def gaussian_log_density(x, mean, cov_inv, log_norm):
    d = np.asarray(x) - mean
    return log_norm - 0.5 * d @ cov_inv @ d


def build_grid(source: PointCloud, params: NdtParams) -> NdtGrid:
    """Mean and conditioned sample covariance for every voxel holding at least
    ``min_points`` source points.

    Eigenvalues below ``eps_rel * lambda_max`` are raised to that floor; a
    voxel whose points coincide uses ``eps_rel * voxel_size**2`` instead.
    """
    pts = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    if len(pts) == 0:
        raise EmptyInput("cannot build an NDT grid from an empty cloud")
    keys = np.floor(pts / params.voxel_size).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    keep = counts >= params.min_points
    if not keep.any():
        raise GridEmpty(f"no voxel holds {params.min_points} points")

    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    dev = pts - means[inverse]
    outer = pack_sym(dev[:, :, None] * dev[:, None, :])
    scat = np.zeros((len(uniq), 6))
    np.add.at(scat, inverse, outer)

    uniq, means, counts, scat = uniq[keep], means[keep], counts[keep], scat[keep]
    cov = scat / (counts - 1)[:, None]

    w, v = sym_eigen3_batch(cov)
    lam_max = w[:, 2]
    floor = np.where(lam_max > 0, params.eps_rel * lam_max, params.eps_rel * params.voxel_size ** 2)
    wc = np.maximum(w, floor[:, None])
    cov_c = pack_sym(np.einsum("nik,nk,njk->nij", v, wc, v))
    icov = pack_sym(np.einsum("nik,nk,njk->nij", v, 1.0 / wc, v))
    log_norm = -1.5 * LOG_2PI - 0.5 * np.log(wc).sum(axis=1)

    codes = _encode(uniq)
    order = np.argsort(codes, kind="stable")
    return NdtGrid(
        voxel_size=params.voxel_size,
        keys=uniq[order],
        means=np.ascontiguousarray(means[order]),
        covariances=np.ascontiguousarray(cov_c[order]),
        inv_covariances=np.ascontiguousarray(icov[order]),
        log_norm=np.ascontiguousarray(log_norm[order]),
        counts=counts[order],
        _codes=codes[order],
    )


def _score_points(grid, pts, t):
    x = np.ascontiguousarray(t.transform_points(pts))
    vid = grid.lookup(x)
    return kernels.ndt_accumulate(pts, x, vid, grid.means, grid.inv_covariances,
                                  grid.log_norm, np.ascontiguousarray(t.rotation))


def score(grid: NdtGrid, cloud, t: RigidTransform):
    """Total log-likelihood of ``t(cloud)`` and its gradient.

    The gradient is taken with respect to ``(tau, omega)`` of the increment
    ``t o (exp(omega), tau)``; points outside stored voxels contribute nothing.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    s, g, _ = _score_points(grid, np.ascontiguousarray(pts, dtype=np.float64), t)
    return s, g


def increment(t: RigidTransform, delta) -> RigidTransform:
    """Right-multiply the pose increment ``delta = (tau, omega)`` onto ``t``."""
    delta = np.asarray(delta, dtype=np.float64)
    return compose(t, RigidTransform(exp_so3(delta[3:]), delta[:3]))


@dataclass
class NdtResult:
    transform: RigidTransform
    iterations: int
    converged: bool
    initial_score: float
    final_score: float
    scores: list  # accepted scores, starting with the initial one


def refine(grid: NdtGrid, target, initial: RigidTransform, params: NdtParams) -> NdtResult:
    """Gradient ascent with backtracking on the NDT log-likelihood.

    Steps follow the gradient in a metric where a rotation is measured by the
    displacement it causes at the target's RMS radius, so that translation and
    rotation share one step length (meters). Each trial step is halved until
    the score does not decrease, at most 10 times; the step doubles (up to one
    voxel) after every accepted move.
    """
    if len(grid) == 0:
        raise GridEmpty("grid has no voxels")
    pts = np.ascontiguousarray(target.points if isinstance(target, PointCloud) else target,
                               dtype=np.float64)
    current = initial
    cur_score, grad, hits = _score_points(grid, pts, current)
    scores = [cur_score]
    if hits == 0:
        return NdtResult(initial, 0, False, cur_score, cur_score, scores)

    radius = max(float(np.sqrt(np.mean(np.einsum("ni,ni->n", pts, pts)))), 1e-9)
    step = params.step_init * grid.voxel_size
    max_step = grid.voxel_size
    converged = False
    it = 0
    while it < params.max_iterations:
        scaled = np.concatenate([grad[:3], grad[3:] / radius])
        gnorm = np.linalg.norm(scaled)
        if gnorm == 0.0:
            converged = True
            break
        direction = scaled / gnorm
        accepted = False
        trial = step
        for _ in range(11):
            delta = trial * np.concatenate([direction[:3], direction[3:] / radius])
            cand = increment(current, delta)
            s, g, h = _score_points(grid, pts, cand)
            if s >= cur_score and h > 0:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            converged = True
            break
        it += 1
        current, cur_score, grad = cand, s, g
        scores.append(cur_score)
        if np.linalg.norm(delta) < params.convergence_tol:
            converged = True
            break
        step = min(2.0 * trial, max_step)
    return NdtResult(current, it, converged, scores[0], cur_score, scores)
