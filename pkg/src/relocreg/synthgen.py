"""Ground-truthed synthetic tunnel scenes.

A scene is an arched tunnel running along +x from ``x = 0`` to ``x = length``:
a flat floor at ``z = 0`` spanning ``|y| <= radius`` under a half-cylinder
wall of the same radius. Junctions add short dead-end side galleries along
``+y`` or ``-y``. Surfaces are displaced along their normals by seeded value
noise, and every point carries the true (inward-facing) surface normal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PointCloud, RigidTransform, axis_angle, invert, rotation_angle
from .errors import ParamError


@dataclass
class SceneParams:
    length: float = 30.0
    radius: float = 2.5
    roughness: float = 0.15
    roughness_scale: float = 1.2
    density: float = 48.0  # points per square meter
    junctions: int = 2
    junction_radius: float = 1.4
    junction_depth: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not (self.length > 0 and self.radius > 0 and self.density > 0):
            raise ParamError("length, radius and density must be > 0")
        if self.roughness < 0 or not self.roughness_scale > 0:
            raise ParamError("roughness must be >= 0 and roughness_scale > 0")
        if self.junctions < 0:
            raise ParamError("junctions must be >= 0")
        if self.junctions and not (0 < self.junction_radius < self.radius and self.junction_depth > 0):
            raise ParamError("junction_radius must lie in (0, radius) and junction_depth > 0")


@dataclass
class DegradationParams:
    noise_sigma: float = 0.0
    dust_fraction: float = 0.0
    dropout_fraction: float = 0.0
    overlap: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ParamError("noise_sigma must be >= 0")
        if not 0 <= self.dust_fraction < 1:
            raise ParamError("dust_fraction must lie in [0, 1)")
        if not 0 <= self.dropout_fraction < 1:
            raise ParamError("dropout_fraction must lie in [0, 1)")
        if not 0 < self.overlap <= 1:
            raise ParamError("overlap must lie in (0, 1]")


class ValueNoise2D:
    """Smoothly interpolated random lattice values, a sum of two octaves."""

    def __init__(self, rng, scale, amplitude, extent=(1.0, 1.0)):
        self.amplitude = amplitude
        self.octaves = []
        for factor, weight in ((1.0, 1.0), (2.7, 0.45)):
            s = scale / factor
            nu = int(np.ceil(extent[0] / s)) + 3
            nv = int(np.ceil(extent[1] / s)) + 3
            self.octaves.append((s, weight, rng.uniform(-1.0, 1.0, size=(nu, nv))))
        self._norm = sum(w for _, w, _ in self.octaves)

    def __call__(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if self.amplitude == 0:
            return np.zeros(np.broadcast(u, v).shape)
        total = 0.0
        for s, w, lat in self.octaves:
            fu, fv = u / s + 1.0, v / s + 1.0
            iu = np.clip(np.floor(fu).astype(np.int64), 0, lat.shape[0] - 2)
            iv = np.clip(np.floor(fv).astype(np.int64), 0, lat.shape[1] - 2)
            tu, tv = fu - iu, fv - iv
            su = tu * tu * (3 - 2 * tu)
            sv = tv * tv * (3 - 2 * tv)
            a = lat[iu, iv] * (1 - su) + lat[iu + 1, iv] * su
            b = lat[iu, iv + 1] * (1 - su) + lat[iu + 1, iv + 1] * su
            total = total + w * (a * (1 - sv) + b * sv)
        return self.amplitude * total / self._norm


def _surface_normals(fn, u, v, inward, h=1e-5):
    du = (fn(u + h, v) - fn(u - h, v)) / (2 * h)
    dv = (fn(u, v + h) - fn(u, v - h)) / (2 * h)
    n = np.cross(du, dv)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flip = np.einsum("ni,ni->n", n, inward) < 0
    n[flip] *= -1
    return n


def _sample(rng, count, lo, hi):
    return rng.uniform(lo, hi, size=count)


def _count(density, area, rng):
    return int(round(density * area))


def generate_scene(params: SceneParams) -> PointCloud:
    """Sample the tunnel surfaces at ``density`` points per square meter."""
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x5CE4E]))
    L, R, amp, sc = params.length, params.radius, params.roughness, params.roughness_scale
    pts, nrm = [], []

    floor_noise = ValueNoise2D(rng, sc, amp, (L, 2 * R + 2 * params.junction_depth))
    wall_noise = ValueNoise2D(rng, sc, amp, (L, np.pi * R))

    junctions = _junction_layout(params, rng)

    def floor(u, v):  # u: x, v: y
        return np.stack([u, v, floor_noise(u, v + R + params.junction_depth)], axis=1)

    def arch(u, v):  # u: x, v: arc length from +y side
        phi = v / R
        rad = R + wall_noise(u, v)
        return np.stack([u, rad * np.cos(phi), rad * np.sin(phi)], axis=1)

    n = _count(params.density, 2 * R * L, rng)
    u, v = _sample(rng, n, 0, L), _sample(rng, n, -R, R)
    p = floor(u, v)
    pts.append(p)
    nrm.append(_surface_normals(floor, u, v, np.tile([0.0, 0.0, 1.0], (n, 1))))

    n = _count(params.density, np.pi * R * L, rng)
    u, v = _sample(rng, n, 0, L), _sample(rng, n, 0, np.pi * R)
    p = arch(u, v)
    inward = -np.stack([np.zeros(n), np.cos(v / R), np.sin(v / R)], axis=1)
    keep = np.ones(n, bool)
    for xj, side, rj, _ in junctions:
        keep &= ~(((p[:, 0] - xj) ** 2 + p[:, 2] ** 2 < rj ** 2) & (side * p[:, 1] > 0))
    pts.append(p[keep])
    nrm.append(_surface_normals(arch, u, v, inward)[keep])

    for xj, side, rj, depth in junctions:
        bp, bn = _junction_points(params, rng, xj, side, rj, depth)
        pts.append(bp)
        nrm.append(bn)

    return PointCloud(np.concatenate(pts), np.concatenate(nrm))


def _junction_layout(params, rng):
    out = []
    if params.junctions == 0:
        return out
    rj, depth = params.junction_radius, params.junction_depth
    # spread junctions along the axis, jittered, alternating sides at random
    slots = np.linspace(0, params.length, params.junctions + 2)[1:-1]
    gap = params.length / (params.junctions + 1)
    for k, x0 in enumerate(slots):
        jitter = rng.uniform(-0.25, 0.25) * max(gap - 2 * rj, 0.0)
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        out.append((float(x0 + jitter), side, rj * rng.uniform(0.8, 1.0), depth * rng.uniform(0.6, 1.0)))
    return out


def _junction_points(params, rng, xj, side, rj, depth):
    R, amp, sc, dens = params.radius, params.roughness, params.roughness_scale, params.density
    y_end = R + depth
    noise_b = ValueNoise2D(rng, sc, amp, (y_end + 1, np.pi * rj))
    noise_f = ValueNoise2D(rng, sc, amp, (2 * rj + 1, y_end + 1))
    noise_c = ValueNoise2D(rng, sc, amp, (2 * rj + 1, rj + 1))
    y_start = np.sqrt(R ** 2 - rj ** 2) - 1e-6  # branch arch begins inside the main wall

    def barch(u, v):  # u: |y|, v: arc length
        psi = v / rj
        rad = rj + noise_b(u, v)
        return np.stack([xj + rad * np.cos(psi), side * u, rad * np.sin(psi)], axis=1)

    def bfloor(u, v):  # u: x offset, v: |y|
        return np.stack([xj + u, side * v, noise_f(u + rj, v)], axis=1)

    def bcap(u, v):  # u: x offset, v: z
        return np.stack([xj + u, side * (y_end + noise_c(u + rj, v)), v], axis=1)

    pts, nrm = [], []
    n = _count(dens, np.pi * rj * (y_end - y_start), rng)
    u, v = _sample(rng, n, y_start, y_end), _sample(rng, n, 0, np.pi * rj)
    p = barch(u, v)
    keep = p[:, 1] ** 2 + p[:, 2] ** 2 >= R ** 2
    psi = v / rj
    inward = -np.stack([np.cos(psi), np.zeros(n), np.sin(psi)], axis=1)
    pts.append(p[keep])
    nrm.append(_surface_normals(barch, u, v, inward)[keep])

    n = _count(dens, 2 * rj * (y_end - R), rng)
    u, v = _sample(rng, n, -rj, rj), _sample(rng, n, R, y_end)
    pts.append(bfloor(u, v))
    nrm.append(_surface_normals(bfloor, u, v, np.tile([0.0, 0.0, 1.0], (n, 1))))

    n = _count(dens, 0.5 * np.pi * rj ** 2, rng)
    # rejection-free half-disc sampling
    rr = rj * np.sqrt(rng.uniform(0, 1, n))
    th = rng.uniform(0, np.pi, n)
    u, v = rr * np.cos(th), rr * np.sin(th)
    pts.append(bcap(u, v))
    nrm.append(_surface_normals(bcap, u, v, np.tile([0.0, -side, 0.0], (n, 1))))
    return np.concatenate(pts), np.concatenate(nrm)


def scene_area(params: SceneParams) -> float:
    """Nominal sampled area (exact for a scene without junctions)."""
    return (2.0 + np.pi) * params.radius * params.length


@dataclass
class SyntheticPair:
    source: PointCloud
    target: PointCloud
    truth: RigidTransform
    source_indices: np.ndarray   # scene rows kept in the source
    target_indices: np.ndarray   # scene rows behind the clean target points
    clean_count: int             # target rows [0, clean_count) are surface points
    dust_count: int = 0
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.source, self.target, self.truth))


def make_pair(scene: PointCloud, truth: RigidTransform, degradation: DegradationParams) -> SyntheticPair:
    """Split a scene into an overlapping source / target pair.

    Both are equal-length windows along the tunnel axis, overlapping by
    ``degradation.overlap`` of the window. The target window is expressed in
    its own frame via ``invert(truth)``, so ``truth`` maps target points onto
    the source. Dropout, Gaussian noise and uniform dust (``dust_fraction``
    times the surviving point count, drawn in the window's bounding box) are
    then applied to the target only.
    """
    rng = np.random.default_rng(np.random.SeedSequence([degradation.seed, 0xD057]))
    x = scene.points[:, 0]
    x0, x1 = float(x.min()), float(x.max())
    width = (x1 - x0) / (2.0 - degradation.overlap)
    src_idx = np.flatnonzero(x <= x0 + width)
    tgt_idx = np.flatnonzero(x >= x1 - width)
    if len(src_idx) == 0 or len(tgt_idx) == 0:
        raise ParamError("overlap produces an empty crop")

    source = scene.select(src_idx)
    crop = scene.points[tgt_idx]
    keep_n = int(round((1.0 - degradation.dropout_fraction) * len(tgt_idx)))
    if keep_n == 0:
        raise ParamError("dropout removes every target point")
    if keep_n < len(tgt_idx):
        kept = np.sort(rng.choice(len(tgt_idx), size=keep_n, replace=False))
        tgt_idx, crop = tgt_idx[kept], crop[kept]

    n_dust = int(round(degradation.dust_fraction * keep_n))
    lo, hi = crop.min(axis=0), crop.max(axis=0)
    dust = rng.uniform(lo, hi, size=(n_dust, 3))

    to_target = invert(truth)
    clean = to_target.transform_points(crop)
    if degradation.noise_sigma > 0:
        clean = clean + rng.normal(0.0, degradation.noise_sigma, size=clean.shape)
    target = PointCloud(np.concatenate([clean, to_target.transform_points(dust)]))
    meta = {"degradation": asdict(degradation), "window": width}
    return SyntheticPair(source, target, truth, src_idx, tgt_idx, len(crop), n_dust, meta)


def pose_error(estimate: RigidTransform, truth: RigidTransform):
    """``(rotation error in degrees, translation error in meters)``."""
    rel = estimate.rotation.T @ truth.rotation
    return (float(np.degrees(rotation_angle(rel))),
            float(np.linalg.norm(estimate.translation - truth.translation)))


def random_truth(seed: int, rotation_deg: float, translation_m: float, exact: bool = False) -> RigidTransform:
    """A rigid motion about a random axis and along a random direction.

    With ``exact`` the magnitudes equal the given values; otherwise they are
    drawn uniformly up to them.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7207]))
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    angle = rotation_deg if exact else rng.uniform(0, rotation_deg)
    dist = translation_m if exact else rng.uniform(0, translation_m)
    return RigidTransform(axis_angle(axis, np.radians(angle)),
                          direction / np.linalg.norm(direction) * dist)
