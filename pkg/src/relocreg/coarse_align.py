"""Descriptor matching and RANSAC rigid-transform estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .core import RigidTransform, nearest_rotation
from .errors import DegenerateGeometry, EmptyInput, NoConsensus, ParamError


@dataclass(frozen=True)
class Correspondence:
    source: int
    target: int
    distance: float


@dataclass
class RansacParams:
    max_iterations: int = 4096
    inlier_threshold: float = 0.3
    sample_size: int = 3
    min_inlier_count: int = 3
    edge_similarity: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ParamError("max_iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ParamError("inlier_threshold must be > 0")
        if self.sample_size != 3:
            raise ParamError("sample_size is fixed at 3")
        if self.min_inlier_count < 3:
            raise ParamError("min_inlier_count must be >= 3")
        if not 0 < self.edge_similarity < 1:
            raise ParamError("edge_similarity must lie in (0, 1)")

    @classmethod
    def for_resolution(cls, voxel_size: float, /, **kw) -> "RansacParams":
        kw.setdefault("inlier_threshold", 3.0 * voxel_size)
        return cls(**kw)


def _nearest_rows(dist):
    # argmin picks the first (lowest index) minimum on ties
    return np.argmin(dist, axis=1)


def match_descriptors(source_descs, target_descs) -> list[Correspondence]:
    """Mutual nearest neighbors in descriptor space, ascending by distance.

    Inputs are ``(n, d)`` arrays (or lists of :class:`FpfhDescriptor`); the
    returned indices refer to rows of those inputs.
    """
    src = _as_matrix(source_descs)
    tgt = _as_matrix(target_descs)
    if len(src) == 0 or len(tgt) == 0:
        raise EmptyInput("both descriptor lists must be non-empty")
    if src.shape[1] != tgt.shape[1]:
        raise ParamError("descriptor lengths differ")
    d = cdist(tgt, src)  # rows: target, cols: source
    best_src = _nearest_rows(d)
    best_tgt = _nearest_rows(d.T)
    t_idx = np.flatnonzero(best_tgt[best_src] == np.arange(len(tgt)))
    s_idx = best_src[t_idx]
    dist = d[t_idx, s_idx]
    order = np.lexsort((t_idx, dist))
    return [Correspondence(int(s_idx[i]), int(t_idx[i]), float(dist[i])) for i in order]


def _as_matrix(descs):
    if isinstance(descs, np.ndarray):
        return np.atleast_2d(descs.astype(np.float64))
    descs = list(descs)
    if not descs:
        return np.zeros((0, 0))
    rows = [getattr(d, "histogram", d) for d in descs]
    return np.asarray(rows, dtype=np.float64)


def _check_rank(pts, what):
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] <= 1e-12 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometry(f"{what} points are coincident or collinear")


def kabsch_umeyama(source_pts, target_pts) -> RigidTransform:
    """Least-squares rigid ``T`` with ``T(target_i) ~ source_i`` (no scaling, no reflection)."""
    src = np.asarray(source_pts, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target_pts, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(tgt):
        raise ParamError("point sets differ in length")
    if len(src) < 3:
        raise ParamError("need at least 3 point pairs")
    _check_rank(tgt, "target")
    _check_rank(src, "source")
    cs, ct = src.mean(axis=0), tgt.mean(axis=0)
    h = (tgt - ct).T @ (src - cs)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    d = 1.0 if d == 0 else d
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cs - r @ ct)


def _batch_kabsch(src, tgt):
    """Vectorized fit over ``(m, 3, 3)`` triplets; returns rotations and translations."""
    cs = src.mean(axis=1)
    ct = tgt.mean(axis=1)
    h = np.einsum("mki,mkj->mij", tgt - ct[:, None], src - cs[:, None])
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    fix = np.ones((len(src), 3))
    fix[:, 2] = d
    r = (v * fix[:, None, :]) @ ut
    t = cs - np.einsum("mij,mj->mi", r, ct)
    return r, t


def _triangle_area2(p):
    return np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def _draw_samples(n, iterations, seed):
    # one seeded stream drawn up front so evaluation order cannot change results
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    a = rng.integers(0, n, size=iterations)
    b = rng.integers(0, n - 1, size=iterations)
    c = rng.integers(0, n - 2, size=iterations)
    b = b + (b >= a)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.stack([a, b, c], axis=1)


def _edge_ok(src, tgt, similarity):
    ok = np.ones(len(src), bool)
    for i, j in ((0, 1), (1, 2), (0, 2)):
        ds = np.linalg.norm(src[:, i] - src[:, j], axis=1)
        dt = np.linalg.norm(tgt[:, i] - tgt[:, j], axis=1)
        lo, hi = np.minimum(ds, dt), np.maximum(ds, dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            ok &= (hi > 0) & (lo / hi >= similarity)
    return ok


def ransac_estimate(source_pts, target_pts, correspondences, params: RansacParams,
                    chunk: int = 512):
    """Robust rigid fit from putative pairs.

    ``source_pts`` / ``target_pts`` are the keypoint coordinates indexed by the
    correspondences (``Correspondence`` objects or ``(source, target)`` pairs).
    Returns ``(transform, inlier_indices)`` where the indices refer to the
    correspondence list.
    """
    pairs = np.array([(c.source, c.target) if isinstance(c, Correspondence) else tuple(c)[:2]
                      for c in correspondences], dtype=np.int64).reshape(-1, 2)
    if len(pairs) < params.sample_size:
        raise ParamError(f"need >= {params.sample_size} correspondences, got {len(pairs)}")
    src = np.asarray(source_pts, dtype=np.float64)[pairs[:, 0]]
    tgt = np.asarray(target_pts, dtype=np.float64)[pairs[:, 1]]
    thr2 = params.inlier_threshold ** 2

    samples = _draw_samples(len(pairs), params.max_iterations, params.seed)
    best = (-1, np.inf, -1)  # inlier count, residual sum, sample row
    best_rt = None
    for start in range(0, len(samples), chunk):
        s = samples[start:start + chunk]
        ps, pt = src[s], tgt[s]
        ok = _edge_ok(ps, pt, params.edge_similarity)
        # non-degenerate triangles only; the per-pair rank check is too slow here
        area_s, area_t = _triangle_area2(ps), _triangle_area2(pt)
        span_s = np.linalg.norm(ps - ps.mean(axis=1, keepdims=True), axis=2).max(axis=1)
        span_t = np.linalg.norm(pt - pt.mean(axis=1, keepdims=True), axis=2).max(axis=1)
        ok &= (area_s > 1e-9 * np.maximum(span_s, 1e-300) ** 2) & (area_t > 1e-9 * np.maximum(span_t, 1e-300) ** 2)
        live = np.flatnonzero(ok)
        if len(live) == 0:
            continue
        r, t = _batch_kabsch(ps[live], pt[live])
        moved = np.einsum("mij,nj->mni", r, tgt) + t[:, None, :]
        res2 = np.einsum("mni,mni->mn", moved - src[None], moved - src[None])
        inl = res2 <= thr2
        counts = inl.sum(axis=1)
        sums = np.where(inl, np.sqrt(res2), 0.0).sum(axis=1)
        m = np.lexsort((sums, -counts))[0]
        if counts[m] > best[0] or (counts[m] == best[0] and sums[m] < best[1]):
            best = (int(counts[m]), float(sums[m]), start + live[m])
            best_rt = (r[m], t[m])

    if best_rt is None or best[0] < params.min_inlier_count:
        raise NoConsensus(f"best model has {max(best[0], 0)} inliers, "
                          f"needs {params.min_inlier_count}")

    model = RigidTransform(nearest_rotation(best_rt[0]), best_rt[1])
    inliers = _inliers(model, src, tgt, thr2)
    try:
        model = kabsch_umeyama(src[inliers], tgt[inliers])
    except DegenerateGeometry:
        pass
    return model, _inliers(model, src, tgt, thr2)


def _inliers(model, src, tgt, thr2):
    res = model.transform_points(tgt) - src
    return np.flatnonzero(np.einsum("ni,ni->n", res, res) <= thr2)
