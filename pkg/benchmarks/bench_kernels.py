"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--size N]
"""
import argparse
import timeit

import numpy as np

from relocreg import _kernels_py
from relocreg.core import KdIndex, RigidTransform, pack_sym

try:
    from relocreg import _kernels as _compiled
except ImportError:
    _compiled = None


def _cases(n, rng):
    pts = rng.uniform(-2, 2, size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    idx = KdIndex(pts)
    nbr, ptr, _ = idx.radius_csr(pts, 0.3, sort=False)
    a = rng.normal(size=(n, 3, 3))
    m6 = pack_sym(a + np.swapaxes(a, 1, 2))
    centers = np.arange(0, n, 4, dtype=np.int64)
    cn, cp, _ = idx.radius_csr(pts[centers], 0.3, sort=False)

    v = 200
    t = RigidTransform.from_rotvec([0.05, -0.03, 0.09], [0.1, 0.0, -0.2])
    x = np.ascontiguousarray(t.transform_points(pts))
    vid = rng.integers(-1, v, size=n).astype(np.int64)
    means = rng.normal(size=(v, 3))
    b = rng.normal(size=(v, 3, 3))
    icov = pack_sym(np.einsum("nij,nkj->nik", b, b) + np.eye(3))
    const = rng.normal(size=v)
    rot = np.ascontiguousarray(t.rotation)
    return {
        "sym_eigen3_batch": lambda k: k.sym_eigen3_batch(m6),
        "scatter_batch": lambda k: k.scatter_batch(pts, nbr, ptr),
        "spfh_batch": lambda k: k.spfh_batch(pts, nrm, centers, cn, cp, 11),
        "ndt_accumulate": lambda k: k.ndt_accumulate(pts, x, vid, means, icov, const, rot),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=20000, help="number of points")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    cases = _cases(args.size, np.random.default_rng(args.seed))
    backends = [("python", _kernels_py)] + ([("cython", _compiled)] if _compiled is not None else [])
    if _compiled is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<18}" + "".join(f"{name:>12}" for name, _ in backends) + ("    speedup" if len(backends) == 2 else ""))
    for kname, fn in cases.items():
        times = []
        for _, mod in backends:
            fn(mod)  # warm up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{kname:<18}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:>8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
