"""Stage orchestration: denoise/downsample, then any of keypoint-feature RANSAC,
NDT and ICP in a fixed order, with metrics and a JSON-ready report."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

from . import __version__
from . import coarse_align, fpfh, icp, iss, ndt, preprocess
from .core import KdIndex, PointCloud, RigidTransform, compose, invert
from .errors import (DegenerateGeometry, GridEmpty, InsufficientOverlap, NoConsensus,
                     ParamError)
from .evaluate import DEFAULT_THRESHOLD, compute_metrics
from .io import load_cloud

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

CONFIGURATIONS = {
    "fpfh": ("fpfh",),
    "fpfh+ndt": ("fpfh", "ndt"),
    "fpfh+icp": ("fpfh", "icp"),
    "ndt+icp": ("ndt", "icp"),
    "fpfh+ndt+icp": ("fpfh", "ndt", "icp"),
}

_NESTED = {
    "preprocess": preprocess.PreprocessParams,
    "iss": iss.IssParams,
    "fpfh": fpfh.FpfhParams,
    "ransac": coarse_align.RansacParams,
    "ndt": ndt.NdtParams,
    "icp": icp.IcpParams,
}


def stages_for(configuration: str):
    try:
        return CONFIGURATIONS[configuration]
    except KeyError:
        raise ParamError(f"unknown configuration {configuration!r}; "
                         f"expected one of {', '.join(CONFIGURATIONS)}") from None


@dataclass
class PipelineConfig:
    """All stage settings. Distances not given explicitly follow the
    preprocessing voxel size (see :meth:`for_resolution`). The RANSAC seed is
    always taken from ``seed``."""

    configuration: str = "fpfh+ndt+icp"
    preprocess: preprocess.PreprocessParams = None
    iss: iss.IssParams = None
    fpfh: fpfh.FpfhParams = None
    ransac: coarse_align.RansacParams = None
    ndt: ndt.NdtParams = None
    icp: icp.IcpParams = None
    metric_threshold: float = DEFAULT_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        stages_for(self.configuration)
        if self.preprocess is None:
            self.preprocess = preprocess.PreprocessParams()
        vs = self.preprocess.voxel_size
        for name in ("iss", "fpfh", "ransac", "ndt", "icp"):
            if getattr(self, name) is None:
                setattr(self, name, _NESTED[name].for_resolution(vs))
        self.ransac.seed = int(self.seed)
        if not self.metric_threshold > 0:
            raise ParamError("metric_threshold must be > 0")

    @property
    def stages(self):
        return CONFIGURATIONS[self.configuration]

    @classmethod
    def for_resolution(cls, voxel_size: float, configuration: str = "fpfh+ndt+icp", **kw):
        return cls(configuration=configuration,
                   preprocess=preprocess.PreprocessParams(voxel_size=voxel_size), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        """Build from a mapping using the field names of this class and of the
        nested parameter classes; omitted values take their defaults."""
        if not isinstance(data, dict):
            raise ParamError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParamError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = dict(data)
        for key in _NESTED:
            if key in kw and not isinstance(kw[key], dict):
                raise ParamError(f"config section {key!r} must be an object")
        pre = preprocess.PreprocessParams(**_checked(preprocess.PreprocessParams, kw.pop("preprocess", {}), "preprocess"))
        vs = pre.voxel_size
        nested = {name: _NESTED[name].for_resolution(vs, **_checked(_NESTED[name], kw.pop(name, {}), name))
                  for name in ("iss", "fpfh", "ransac", "ndt", "icp")}
        try:
            return cls(preprocess=pre, **nested, **kw)
        except TypeError as exc:
            raise ParamError(str(exc)) from None

    def to_dict(self) -> dict:
        out = {"configuration": self.configuration}
        for name in _NESTED:
            out[name] = asdict(getattr(self, name))
        out["metric_threshold"] = self.metric_threshold
        out["seed"] = self.seed
        return out


def _checked(klass, values, section):
    names = {f.name for f in fields(klass)}
    unknown = set(values) - names
    if unknown:
        raise ParamError(f"unknown keys in {section!r}: {', '.join(sorted(unknown))}")
    return dict(values)


@dataclass
class StageReport:
    name: str
    transform: RigidTransform          # this stage's increment
    cumulative: RigidTransform         # increment composed onto the previous cumulative
    elapsed_ms: float
    metrics: object = None
    converged: bool = True
    iterations: int = 0
    flags: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self, timings=True):
        d = {
            "name": self.name,
            "transform": _flat(self.transform),
            "cumulative": _flat(self.cumulative),
            "converged": self.converged,
            "iterations": self.iterations,
            "flags": list(self.flags),
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "details": self.details,
        }
        if timings:
            d["elapsed_ms"] = self.elapsed_ms
        return d


@dataclass
class RegistrationReport:
    config: PipelineConfig
    stages: list
    transform: RigidTransform
    metrics: object
    preprocess: dict
    keypoints: dict
    correspondences: int
    ransac_inliers: int
    flags: list
    timings_ms: dict

    @property
    def fallback(self) -> bool:
        """True when a stage failed and the run continued from an earlier estimate."""
        return bool(self.flags)

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "schema": SCHEMA_VERSION,
            "tool": "relocreg",
            "version": __version__,
            "configuration": self.config.configuration,
            "config": self.config.to_dict(),
            "transform": _flat(self.transform),
            "metrics": self.metrics.to_dict(),
            "preprocess": self.preprocess,
            "keypoints": self.keypoints,
            "correspondences": self.correspondences,
            "ransac_inliers": self.ransac_inliers,
            "flags": list(self.flags),
            "stages": [s.to_dict(timings) for s in self.stages],
        }
        if timings:
            d["timings_ms"] = self.timings_ms
        return d


def _flat(t: RigidTransform):
    return [float(v) for v in t.matrix.reshape(-1)]


class _Clock:
    def __init__(self):
        self.start = time.perf_counter()

    def ms(self):
        return round((time.perf_counter() - self.start) * 1000.0, 3)


def run(source_path, target_path, config: PipelineConfig) -> RegistrationReport:
    """Load both clouds and register the target onto the source."""
    source = load_cloud(source_path)
    target = load_cloud(target_path)
    return run_clouds(source, target, config)


def _prepare(cloud, params, with_normals, name):
    filtered, removed = preprocess.remove_statistical_outliers(
        cloud.without_normals(), params.sor_k, params.sor_std_mult)
    down = preprocess.voxel_downsample(filtered, params.voxel_size)
    if with_normals:
        down = preprocess.estimate_normals(down, min(params.normal_k, len(down)),
                                           params.normal_viewpoint)
    log.info("%s: %d points, %d outliers removed, %d after downsampling",
             name, len(cloud), removed, len(down))
    return filtered, down, len(removed)


def run_clouds(source: PointCloud, target: PointCloud, config: PipelineConfig) -> RegistrationReport:
    """Register ``target`` onto ``source``; the result maps target coordinates
    into the source frame."""
    stages = config.stages
    total = _Clock()
    clock = _Clock()
    need_normals = "fpfh" in stages
    src_f, src_d, src_removed = _prepare(source, config.preprocess, need_normals, "source")
    tgt_f, tgt_d, tgt_removed = _prepare(target, config.preprocess, need_normals, "target")
    src_index = KdIndex(src_f.points)
    timings = {"preprocess": clock.ms()}
    pre = {
        "source_points": len(source), "source_outliers_removed": int(src_removed),
        "source_downsampled": len(src_d),
        "target_points": len(target), "target_outliers_removed": int(tgt_removed),
        "target_downsampled": len(tgt_d),
    }

    cumulative = RigidTransform.identity()
    reports = []
    flags = []
    keypoints = {"source": 0, "target": 0}
    n_corr = 0
    n_inl = 0

    for name in stages:
        clock = _Clock()
        stage_flags = []
        details = {}
        converged, iterations = True, 0
        estimate = cumulative
        if name == "fpfh":
            estimate, info = _coarse(src_d, tgt_d, config)
            keypoints = info["keypoints"]
            n_corr, n_inl = info["correspondences"], info["inliers"]
            details = {"keypoints": keypoints, "correspondences": n_corr, "ransac_inliers": n_inl}
            if info["failure"]:
                stage_flags.append("no_consensus")
                details["error"] = info["failure"]
                converged = False
                estimate = cumulative
        elif name == "ndt":
            try:
                grid = ndt.build_grid(src_f, config.ndt)
                res = ndt.refine(grid, tgt_d, cumulative, config.ndt)
                estimate, converged, iterations = res.transform, res.converged, res.iterations
                details = {"voxels": len(grid), "initial_score": res.initial_score,
                           "final_score": res.final_score}
            except GridEmpty as exc:
                stage_flags.append("grid_empty")
                details["error"] = str(exc)
                converged = False
        elif name == "icp":
            try:
                res = icp.refine(src_index, tgt_f, cumulative, config.icp)
                estimate, converged, iterations = res.transform, res.converged, res.iterations
                details = {"rmse": res.rmse}
            except InsufficientOverlap as exc:
                stage_flags.append("insufficient_overlap")
                details["error"] = str(exc)
                converged = False
                iterations = exc.iterations
                if exc.transform is not None:
                    estimate = exc.transform
        # record the stage as an increment so cumulative = increment o previous
        delta = compose(estimate, invert(cumulative))
        cumulative = compose(delta, cumulative)
        metrics = compute_metrics(src_index, tgt_f, cumulative, config.metric_threshold)
        elapsed = clock.ms()
        timings[name] = elapsed
        flags.extend(f"{name}:{f}" for f in stage_flags)
        for f in stage_flags:
            log.warning("stage %s: %s (%s)", name, f, details.get("error", ""))
        reports.append(StageReport(name, delta, cumulative, elapsed, metrics, converged,
                                   iterations, stage_flags, details))
        log.info("stage %s: fraction %.4f rmse %s (%.1f ms)", name, metrics.inlier_fraction,
                 metrics.inlier_rmse, elapsed)

    final = compute_metrics(src_index, tgt_f, cumulative, config.metric_threshold)
    timings["total"] = total.ms()
    return RegistrationReport(config, reports, cumulative, final, pre, keypoints, n_corr, n_inl,
                              flags, timings)


def _coarse(src_d, tgt_d, config):
    info = {"keypoints": {"source": 0, "target": 0}, "correspondences": 0, "inliers": 0,
            "failure": None}
    src_index, tgt_index = KdIndex(src_d.points), KdIndex(tgt_d.points)
    ks = iss.detect_keypoints(src_d, config.iss, src_index)
    kt = iss.detect_keypoints(tgt_d, config.iss, tgt_index)
    info["keypoints"] = {"source": len(ks), "target": len(kt)}
    if len(ks) < 3 or len(kt) < 3:
        info["failure"] = "fewer than 3 keypoints"
        return RigidTransform.identity(), info
    ds = fpfh.compute_fpfh(src_d, ks, config.fpfh, src_index)
    dt = fpfh.compute_fpfh(tgt_d, kt, config.fpfh, tgt_index)
    corr = coarse_align.match_descriptors(ds, dt)
    info["correspondences"] = len(corr)
    try:
        if len(corr) < config.ransac.sample_size:
            raise NoConsensus(f"only {len(corr)} correspondences")
        sp = src_d.points[[k.index for k in ks]]
        tp = tgt_d.points[[k.index for k in kt]]
        t, inliers = coarse_align.ransac_estimate(sp, tp, corr, config.ransac)
        info["inliers"] = len(inliers)
        return t, info
    except (NoConsensus, DegenerateGeometry) as exc:
        info["failure"] = str(exc)
        return RigidTransform.identity(), info


def summary_row(report: RegistrationReport) -> dict:
    m = report.metrics
    return {
        "config": report.config.configuration,
        "rmse_m": m.inlier_rmse,
        "inlier_pct": 100.0 * m.inlier_fraction,
        "wall_ms": report.timings_ms.get("total", float("nan")),
    }


def recompose(report: RegistrationReport) -> RigidTransform:
    """Cumulative transform rebuilt from the per-stage increments."""
    out = RigidTransform.identity()
    for s in report.stages:
        out = compose(s.transform, out)
    return out


__all__ = ["CONFIGURATIONS", "PipelineConfig", "RegistrationReport", "StageReport", "run",
           "run_clouds", "stages_for", "recompose", "summary_row"]
