"""Command-line entry point: ``relocreg register|eval|synth|bench``."""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .core import RigidTransform
from .errors import ParamError, RegistrationError
from .evaluate import DEFAULT_THRESHOLD, compute_metrics
from .io import (atomic_write, dumps_json, format_transform, load_cloud, load_json,
                 load_transform, save_cloud, save_json)
from .pipeline import CONFIGURATIONS, PipelineConfig, run
from .synthgen import DegradationParams, SceneParams, generate_scene, make_pair, pose_error, random_truth

log = logging.getLogger("relocreg")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_FALLBACK = 2

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

CSV_COLUMNS = ["pair", "config", "rmse_m", "inlier_pct", "rot_err_deg", "trans_err_m", "wall_ms"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems share the fatal exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FATAL, f"{self.prog}: error: {message}\n")


def _setup_logging():
    name = os.environ.get("REG_LOG", "warn").strip().lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False
    if name not in LOG_LEVELS:
        log.warning("unknown REG_LOG value %r, using 'warn'", name)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relocreg", description="Rigid point-cloud registration toolkit.")
    p.add_argument("--version", action="version", version=f"relocreg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a target cloud onto a source cloud")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--config", help="JSON pipeline configuration")
    r.add_argument("--preset", choices=list(CONFIGURATIONS), help="stage configuration (overrides the file)")
    r.add_argument("--out", required=True, help="report path (JSON)")
    r.add_argument("--transform", required=True, help="4x4 transform output path")
    r.add_argument("--seed", type=int, help="RANSAC seed (overrides the file)")
    r.add_argument("--omit-timings", action="store_true",
                   help="leave wall-clock timings out of the report")

    e = sub.add_parser("eval", help="inlier fraction and RMSE of a registered pair")
    e.add_argument("--source", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--transform", required=True)
    e.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)

    s = sub.add_parser("synth", help="write a synthetic source/target pair with known truth")
    s.add_argument("--scene-config", required=True, help="JSON with scene/degradation/truth sections")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--format", choices=["binary", "ascii"], default="binary")

    b = sub.add_parser("bench", help="run all five configurations over pair directories")
    b.add_argument("--pairs-dir", required=True)
    b.add_argument("--out", required=True, help="CSV output path")
    b.add_argument("--config", help="JSON pipeline configuration used as the base for every preset")
    b.add_argument("--jobs", type=int, default=1)
    return p


def _load_config(path, preset=None, seed=None) -> PipelineConfig:
    data = load_json(path) if path else {}
    if not isinstance(data, dict):
        raise ParamError("config must be a JSON object")
    data = dict(data)
    if preset is not None:
        data["configuration"] = preset
    if seed is not None:
        data["seed"] = seed
    return PipelineConfig.from_dict(data)


def cmd_register(args) -> int:
    if args.config is None and args.preset is None:
        raise UsageError("one of --config or --preset is required")
    config = _load_config(args.config, args.preset, args.seed)
    report = run(args.source, args.target, config)
    # render both artifacts before touching the disk so a failure writes neither
    report_text = dumps_json(report.to_dict(timings=not args.omit_timings))
    transform_text = format_transform(report.transform)
    atomic_write(args.transform, transform_text.encode("ascii"))
    atomic_write(args.out, report_text.encode("utf-8"))
    m = report.metrics
    log.info("inlier fraction %.4f, inlier RMSE %s", m.inlier_fraction, m.inlier_rmse)
    if report.fallback:
        log.warning("registration fell back: %s", ", ".join(report.flags))
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.threshold > 0:
        raise UsageError("--threshold must be > 0")
    source = load_cloud(args.source)
    target = load_cloud(args.target)
    t = load_transform(args.transform)
    m = compute_metrics(source, target, t, args.threshold)
    sys.stdout.write(dumps_json(m.to_dict()))
    return EXIT_OK


def _truth_from(section: dict) -> RigidTransform:
    if "matrix" in section:
        return RigidTransform.from_matrix(np.asarray(section["matrix"], dtype=float).reshape(4, 4))
    return random_truth(int(section.get("seed", 0)), float(section.get("rotation_deg", 30.0)),
                        float(section.get("translation_m", 5.0)), bool(section.get("exact", False)))


def synth_pair(config: dict, out_dir, fmt="binary"):
    """Generate one pair from a scene configuration and write it to ``out_dir``."""
    unknown = set(config) - {"scene", "degradation", "truth"}
    if unknown:
        raise ParamError(f"unknown scene-config keys: {', '.join(sorted(unknown))}")
    try:
        scene_p = SceneParams(**config.get("scene", {}))
        deg_p = DegradationParams(**config.get("degradation", {}))
    except TypeError as exc:
        raise ParamError(str(exc)) from None
    truth = _truth_from(config.get("truth", {}))
    pair = make_pair(generate_scene(scene_p), truth, deg_p)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(pair.source, out / "source.ply", fmt)
    save_cloud(pair.target, out / "target.ply", fmt)
    atomic_write(out / "truth.txt", format_transform(truth).encode("ascii"))
    manifest = {
        "schema": 1,
        "tool": "relocreg",
        "version": __version__,
        "scene": asdict(scene_p),
        "degradation": asdict(deg_p),
        "truth": [float(v) for v in truth.matrix.reshape(-1)],
        "source_points": len(pair.source),
        "target_points": len(pair.target),
        "target_clean_points": pair.clean_count,
        "dust_points": pair.dust_count,
        "files": {"source": "source.ply", "target": "target.ply", "truth": "truth.txt"},
    }
    save_json(manifest, out / "manifest.json")
    return pair


def cmd_synth(args) -> int:
    config = load_json(args.scene_config)
    if not isinstance(config, dict):
        raise ParamError("scene config must be a JSON object")
    synth_pair(config, args.out_dir, args.format)
    return EXIT_OK


def _pair_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    dirs = sorted(d for d in root.iterdir()
                  if d.is_dir() and (d / "source.ply").exists() and (d / "target.ply").exists())
    if not dirs:
        raise UsageError(f"no pair directories (with source.ply and target.ply) under {root}")
    return dirs


def _bench_one(job):
    pair_dir, base, preset = job
    data = dict(base)
    data["configuration"] = preset
    config = PipelineConfig.from_dict(data)
    report = run(pair_dir / "source.ply", pair_dir / "target.ply", config)
    row = {"pair": pair_dir.name, "config": preset,
           "rmse_m": report.metrics.inlier_rmse,
           "inlier_pct": 100.0 * report.metrics.inlier_fraction,
           "rot_err_deg": "", "trans_err_m": "",
           "wall_ms": report.timings_ms["total"]}
    truth_path = pair_dir / "truth.txt"
    if truth_path.exists():
        rot, trans = pose_error(report.transform, load_transform(truth_path))
        row["rot_err_deg"], row["trans_err_m"] = rot, trans
    return row


def _fmt(v):
    if isinstance(v, float):
        return "" if v != v else "%.6g" % v
    return v


def cmd_bench(args) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    base = load_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise ParamError("config must be a JSON object")
    PipelineConfig.from_dict(dict(base))  # validate once up front
    jobs = [(d, base, preset) for d in _pair_dirs(args.pairs_dir) for preset in CONFIGURATIONS]
    if args.jobs == 1:
        rows = [_bench_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_bench_one, jobs))  # map keeps input order
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    atomic_write(args.out, buf.getvalue().encode("utf-8"))
    return EXIT_OK


COMMANDS = {"register": cmd_register, "eval": cmd_eval, "synth": cmd_synth, "bench": cmd_bench}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"relocreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (RegistrationError, OSError) as exc:
        print(f"relocreg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
