"""Vectorized numpy versions of the compiled kernels.

Selected at import when the extension is unavailable (or when
``RELOCREG_PURE_PYTHON=1``). Every function returns the same shapes and
follows the same arithmetic as its counterpart in ``_kernels.pyx``.
"""
import numpy as np

_JACOBI_SWEEPS = 50


def _jacobi(a):
    a = a.copy()
    v = np.eye(3)
    for _ in range(_JACOBI_SWEEPS):
        if a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2 == 0.0:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def _unpack(m6):
    m = np.empty((len(m6), 3, 3))
    m[:, 0, 0] = m6[:, 0]
    m[:, 0, 1] = m[:, 1, 0] = m6[:, 1]
    m[:, 0, 2] = m[:, 2, 0] = m6[:, 2]
    m[:, 1, 1] = m6[:, 3]
    m[:, 1, 2] = m[:, 2, 1] = m6[:, 4]
    m[:, 2, 2] = m6[:, 5]
    return m


def sym_eigen3_batch(m6):
    m6 = np.ascontiguousarray(m6, dtype=np.float64)
    n = len(m6)
    w = np.zeros((n, 3))
    v = np.tile(np.eye(3), (n, 1, 1))
    if n == 0:
        return w, v

    scale = np.abs(m6).max(axis=1)
    live = scale > 0.0
    b = _unpack(m6[live] / scale[live, None])
    sc = scale[live]
    q = np.trace(b, axis1=1, axis2=2) / 3.0
    c = b - q[:, None, None] * np.eye(3)
    p = np.sqrt(((c[:, 0, 0] ** 2 + c[:, 1, 1] ** 2 + c[:, 2, 2] ** 2)
                 + 2.0 * (c[:, 0, 1] ** 2 + c[:, 0, 2] ** 2 + c[:, 1, 2] ** 2)) / 6.0)

    ww = np.empty((len(b), 3))
    vv = np.empty((len(b), 3, 3))

    flat = p <= 1e-12
    for i in np.flatnonzero(flat):
        ww[i], vv[i] = _jacobi(b[i])

    gen = ~flat
    if gen.any():
        ww[gen], vv[gen] = _closed_form(c[gen], q[gen], p[gen])

    order = np.argsort(ww, axis=1, kind="stable")
    ww = np.take_along_axis(ww, order, axis=1)
    vv = np.take_along_axis(vv, order[:, None, :], axis=2)
    w[live] = ww * sc[:, None]
    v[live] = vv
    return w, v


def _closed_form(c, q, p):
    d = c / p[:, None, None]
    # cofactor expansion, same order as the compiled kernel
    r = np.clip(0.5 * (d[:, 0, 0] * (d[:, 1, 1] * d[:, 2, 2] - d[:, 1, 2] * d[:, 2, 1])
                       - d[:, 0, 1] * (d[:, 1, 0] * d[:, 2, 2] - d[:, 1, 2] * d[:, 2, 0])
                       + d[:, 0, 2] * (d[:, 1, 0] * d[:, 2, 1] - d[:, 1, 1] * d[:, 2, 0])),
                -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    b_hi = 2.0 * np.cos(phi)
    b_lo = 2.0 * np.cos(phi + 2.0 * np.pi / 3.0)
    b_mid = -(b_hi + b_lo)
    hi_first = (b_hi - b_mid) >= (b_mid - b_lo)
    beta = np.where(hi_first, b_hi, b_lo)

    rows = d - beta[:, None, None] * np.eye(3)
    crosses = np.stack([np.cross(rows[:, 0], rows[:, 1]),
                        np.cross(rows[:, 0], rows[:, 2]),
                        np.cross(rows[:, 1], rows[:, 2])], axis=1)
    norms = np.einsum("nki,nki->nk", crosses, crosses)
    # first maximum wins, as in the compiled loop
    pick = np.argmax(norms, axis=1)
    best = crosses[np.arange(len(d)), pick]
    va = best / np.sqrt(norms[np.arange(len(d)), pick])[:, None]

    use_x = np.abs(va[:, 0]) > np.abs(va[:, 1])
    uu = np.zeros_like(va)
    nx = np.sqrt(va[:, 0] ** 2 + va[:, 2] ** 2)
    ny = np.sqrt(va[:, 1] ** 2 + va[:, 2] ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        uu[:, 0] = np.where(use_x, -va[:, 2] / nx, 0.0)
        uu[:, 1] = np.where(use_x, 0.0, va[:, 2] / ny)
        uu[:, 2] = np.where(use_x, va[:, 0] / nx, -va[:, 1] / ny)
    wv = np.cross(va, uu)

    du = np.einsum("nij,nj->ni", d, uu)
    dw = np.einsum("nij,nj->ni", d, wv)
    m00 = np.einsum("ni,ni->n", uu, du)
    m01 = np.einsum("ni,ni->n", wv, du)
    m11 = np.einsum("ni,ni->n", wv, dw)
    half = 0.5 * (m00 - m11)
    rad = np.sqrt(half * half + m01 * m01)
    mu_hi = 0.5 * (m00 + m11) + rad
    mu_lo = 0.5 * (m00 + m11) - rad
    ang = 0.5 * np.arctan2(2.0 * m01, m00 - m11)
    cs, sn = np.cos(ang), np.sin(ang)
    e_hi = cs[:, None] * uu + sn[:, None] * wv
    e_lo = -sn[:, None] * uu + cs[:, None] * wv

    vals = np.where(hi_first[:, None],
                    np.stack([mu_lo, mu_hi, beta], axis=1),
                    np.stack([beta, mu_lo, mu_hi], axis=1))
    vecs = np.where(hi_first[:, None, None],
                    np.stack([e_lo, e_hi, va], axis=2),
                    np.stack([va, e_lo, e_hi], axis=2))
    return q[:, None] + p[:, None] * vals, vecs


def scatter_batch(points, nbr_idx, nbr_ptr):
    points = np.asarray(points, dtype=np.float64)
    counts = np.diff(nbr_ptr)
    n = len(counts)
    out = np.zeros((n, 6))
    if len(nbr_idx) == 0:
        return out
    owner = np.repeat(np.arange(n), counts)
    nb = points[nbr_idx]
    sums = np.zeros((n, 3))
    np.add.at(sums, owner, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        cent = sums / counts[:, None]
    dev = nb - cent[owner]
    prods = np.stack([dev[:, 0] * dev[:, 0], dev[:, 0] * dev[:, 1], dev[:, 0] * dev[:, 2],
                      dev[:, 1] * dev[:, 1], dev[:, 1] * dev[:, 2], dev[:, 2] * dev[:, 2]], axis=1)
    np.add.at(out, owner, prods)
    return out


def _bin_unit(x, bins):
    return np.clip(np.floor((x + 1.0) * 0.5 * bins), 0, bins - 1).astype(np.int64)


def _bin_angle(th, bins):
    b = np.clip(np.floor((th + np.pi) / (2.0 * np.pi) * bins), 0, bins - 1).astype(np.int64)
    return np.where(th <= -np.pi, bins - 1, b)


def spfh_batch(points, normals, centers, nbr_idx, nbr_ptr, bins):
    counts = np.diff(nbr_ptr)
    m = len(centers)
    out = np.zeros((m, 3 * bins))
    if len(nbr_idx) == 0:
        return out
    owner = np.repeat(np.arange(m), counts)
    i = np.asarray(centers)[owner]
    j = np.asarray(nbr_idx)
    keep = j != i
    owner, i, j = owner[keep], i[keep], j[keep]

    d = points[j] - points[i]
    dist = np.sqrt(np.einsum("ni,ni->n", d, d))
    u = normals[i]
    v = np.cross(d, u)
    vn = np.sqrt(np.einsum("ni,ni->n", v, v))
    ok = (dist >= 1e-12) & (vn >= 1e-9 * dist)
    owner, d, dist, u, v, vn, j = owner[ok], d[ok], dist[ok], u[ok], v[ok], vn[ok], j[ok]
    v = v / vn[:, None]
    w = np.cross(u, v)
    nj = normals[j]
    alpha = np.einsum("ni,ni->n", v, nj)
    phi = np.einsum("ni,ni->n", u, d) / dist
    theta = np.arctan2(np.einsum("ni,ni->n", w, nj), np.einsum("ni,ni->n", u, nj))

    np.add.at(out, (owner, _bin_unit(alpha, bins)), 1.0)
    np.add.at(out, (owner, bins + _bin_unit(phi, bins)), 1.0)
    np.add.at(out, (owner, 2 * bins + _bin_angle(theta, bins)), 1.0)
    valid = np.bincount(owner, minlength=m).astype(np.float64)
    nz = valid > 0
    out[nz] *= (100.0 / valid[nz])[:, None]
    return out


def ndt_accumulate(p, x, vid, means, icov, const, rot):
    hit = vid >= 0
    k = vid[hit]
    if len(k) == 0:
        return 0.0, np.zeros(6), 0
    dd = x[hit] - means[k]
    ic = _unpack(icov[k])
    q = np.einsum("nij,nj->ni", ic, dd)
    score = float(np.sum(const[k] - 0.5 * np.einsum("ni,ni->n", dd, q)))
    rq = q @ rot
    grad = np.empty(6)
    grad[:3] = -rq.sum(axis=0)
    grad[3:] = np.cross(rq, p[hit]).sum(axis=0)
    return score, grad, int(len(k))
