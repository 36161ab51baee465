# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. ``_kernels_py`` mirrors every function here."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, acos, cos, sin, atan2, floor, hypot, M_PI
from libc.stdint cimport int64_t

cnp.import_array()

cdef int JACOBI_SWEEPS = 50


cdef inline void _cross(double* a, double* b, double* out) nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline double _dot(double* a, double* b) nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef void _jacobi(double[3][3] a, double* w, double[3][3] v) nogil:
    cdef int i, j, k, p, q, sweep
    cdef double off, theta, t, c, s, apq, app, aqq, akp, akq, vkp, vkq
    for i in range(3):
        for j in range(3):
            v[i][j] = 1.0 if i == j else 0.0
    for sweep in range(JACOBI_SWEEPS):
        off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]
        if off == 0.0:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p][q]
                if apq == 0.0:
                    continue
                app = a[p][p]
                aqq = a[q][q]
                theta = (aqq - app) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (fabs(theta) + hypot(theta, 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(3):
                    akp = a[k][p]
                    akq = a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(3):
                    akp = a[p][k]
                    akq = a[q][k]
                    a[p][k] = c * akp - s * akq
                    a[q][k] = s * akp + c * akq
                for k in range(3):
                    vkp = v[k][p]
                    vkq = v[k][q]
                    v[k][p] = c * vkp - s * vkq
                    v[k][q] = s * vkp + c * vkq
    for i in range(3):
        w[i] = a[i][i]


cdef void _eigen_one(double* m6, double* w_out, double* v_out) nogil:
    # m6 = (xx, xy, xz, yy, yz, zz); v_out is row-major 3x3 with eigenvectors as columns.
    cdef double b[3][3]
    cdef double dmat[3][3]
    cdef double vv[3][3]
    cdef double ww[3]
    cdef double vecs[3][3]
    cdef double vals[3]
    cdef double scale = 0.0, q, p2, p, r, phi, b_lo, b_hi, b_mid, beta
    cdef double rows[3][3]
    cdef double cr[3]
    cdef double best[3]
    cdef double nrm, bestn, uu[3], wv[3], va[3], tmp[3]
    cdef double m00, m01, m11, half, rad, ang, c, s, mu_hi, mu_lo
    cdef int i, j, k, a_first

    for i in range(6):
        if fabs(m6[i]) > scale:
            scale = fabs(m6[i])
    if scale == 0.0:
        for i in range(3):
            w_out[i] = 0.0
            for j in range(3):
                v_out[3 * i + j] = 1.0 if i == j else 0.0
        return

    b[0][0] = m6[0] / scale
    b[0][1] = m6[1] / scale
    b[0][2] = m6[2] / scale
    b[1][1] = m6[3] / scale
    b[1][2] = m6[4] / scale
    b[2][2] = m6[5] / scale
    b[1][0] = b[0][1]
    b[2][0] = b[0][2]
    b[2][1] = b[1][2]

    q = (b[0][0] + b[1][1] + b[2][2]) / 3.0
    p2 = ((b[0][0] - q) * (b[0][0] - q) + (b[1][1] - q) * (b[1][1] - q)
          + (b[2][2] - q) * (b[2][2] - q)
          + 2.0 * (b[0][1] * b[0][1] + b[0][2] * b[0][2] + b[1][2] * b[1][2])) / 6.0
    p = sqrt(p2)

    if p <= 1e-12:
        _jacobi(b, ww, vv)
        _sort_pairs(ww, vv, w_out, v_out, scale)
        return

    for i in range(3):
        for j in range(3):
            dmat[i][j] = (b[i][j] - (q if i == j else 0.0)) / p
    r = 0.5 * (dmat[0][0] * (dmat[1][1] * dmat[2][2] - dmat[1][2] * dmat[2][1])
               - dmat[0][1] * (dmat[1][0] * dmat[2][2] - dmat[1][2] * dmat[2][0])
               + dmat[0][2] * (dmat[1][0] * dmat[2][1] - dmat[1][1] * dmat[2][0]))
    if r > 1.0:
        r = 1.0
    elif r < -1.0:
        r = -1.0
    phi = acos(r) / 3.0
    b_hi = 2.0 * cos(phi)
    b_lo = 2.0 * cos(phi + 2.0 * M_PI / 3.0)
    b_mid = -(b_hi + b_lo)

    # the extreme root farther from the middle one has a gap >= 1.5 in the
    # normalized matrix, so its null vector from row cross products is stable
    if b_hi - b_mid >= b_mid - b_lo:
        beta = b_hi
        a_first = 1
    else:
        beta = b_lo
        a_first = 0

    for i in range(3):
        for j in range(3):
            rows[i][j] = dmat[i][j] - (beta if i == j else 0.0)
    bestn = -1.0
    for k in range(3):
        if k == 0:
            _cross(rows[0], rows[1], cr)
        elif k == 1:
            _cross(rows[0], rows[2], cr)
        else:
            _cross(rows[1], rows[2], cr)
        nrm = _dot(cr, cr)
        if nrm > bestn:
            bestn = nrm
            best[0] = cr[0]
            best[1] = cr[1]
            best[2] = cr[2]
    nrm = sqrt(bestn)
    for i in range(3):
        va[i] = best[i] / nrm

    # orthonormal complement of va
    if fabs(va[0]) > fabs(va[1]):
        nrm = sqrt(va[0] * va[0] + va[2] * va[2])
        uu[0] = -va[2] / nrm
        uu[1] = 0.0
        uu[2] = va[0] / nrm
    else:
        nrm = sqrt(va[1] * va[1] + va[2] * va[2])
        uu[0] = 0.0
        uu[1] = va[2] / nrm
        uu[2] = -va[1] / nrm
    _cross(va, uu, wv)

    for i in range(3):
        tmp[i] = dmat[i][0] * uu[0] + dmat[i][1] * uu[1] + dmat[i][2] * uu[2]
    m00 = _dot(uu, tmp)
    m01 = _dot(wv, tmp)
    for i in range(3):
        tmp[i] = dmat[i][0] * wv[0] + dmat[i][1] * wv[1] + dmat[i][2] * wv[2]
    m11 = _dot(wv, tmp)
    half = 0.5 * (m00 - m11)
    rad = sqrt(half * half + m01 * m01)
    mu_hi = 0.5 * (m00 + m11) + rad
    mu_lo = 0.5 * (m00 + m11) - rad
    ang = 0.5 * atan2(2.0 * m01, m00 - m11)
    c = cos(ang)
    s = sin(ang)

    if a_first == 1:
        vals[2] = beta
        vals[1] = mu_hi
        vals[0] = mu_lo
        for i in range(3):
            vecs[i][2] = va[i]
            vecs[i][1] = c * uu[i] + s * wv[i]
            vecs[i][0] = -s * uu[i] + c * wv[i]
    else:
        vals[0] = beta
        vals[2] = mu_hi
        vals[1] = mu_lo
        for i in range(3):
            vecs[i][0] = va[i]
            vecs[i][2] = c * uu[i] + s * wv[i]
            vecs[i][1] = -s * uu[i] + c * wv[i]

    for i in range(3):
        ww[i] = (q + p * vals[i])
        for j in range(3):
            vv[i][j] = vecs[i][j]
    _sort_pairs(ww, vv, w_out, v_out, scale)


cdef void _sort_pairs(double* ww, double[3][3] vv, double* w_out, double* v_out, double scale) nogil:
    cdef int order[3]
    cdef int i, j, k, t
    order[0] = 0
    order[1] = 1
    order[2] = 2
    for i in range(3):
        for j in range(2 - i):
            if ww[order[j]] > ww[order[j + 1]]:
                t = order[j]
                order[j] = order[j + 1]
                order[j + 1] = t
    for k in range(3):
        w_out[k] = ww[order[k]] * scale
        for i in range(3):
            v_out[3 * i + k] = vv[i][order[k]]


def sym_eigen3_batch(const double[:, ::1] m6):
    """Eigen-decompose ``n`` packed symmetric 3x3 matrices.

    Returns ascending eigenvalues ``(n, 3)`` and eigenvector matrices
    ``(n, 3, 3)`` whose columns pair with the eigenvalues.
    """
    cdef Py_ssize_t n = m6.shape[0], i
    w = np.empty((n, 3), dtype=np.float64)
    v = np.empty((n, 3, 3), dtype=np.float64)
    cdef double[:, ::1] wv = w
    cdef double[:, :, ::1] vv = v
    with nogil:
        for i in range(n):
            _eigen_one(&m6[i, 0], &wv[i, 0], &vv[i, 0, 0])
    return w, v


def scatter_batch(const double[:, ::1] points, const int64_t[::1] nbr_idx, const int64_t[::1] nbr_ptr):
    """Unnormalized scatter about the centroid of each CSR neighborhood."""
    cdef Py_ssize_t n = nbr_ptr.shape[0] - 1, i, a, j
    cdef double cx, cy, cz, dx, dy, dz, cnt
    out = np.zeros((n, 6), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            if nbr_ptr[i + 1] == nbr_ptr[i]:
                continue
            cx = 0.0
            cy = 0.0
            cz = 0.0
            for a in range(nbr_ptr[i], nbr_ptr[i + 1]):
                j = nbr_idx[a]
                cx += points[j, 0]
                cy += points[j, 1]
                cz += points[j, 2]
            cnt = <double>(nbr_ptr[i + 1] - nbr_ptr[i])
            cx /= cnt
            cy /= cnt
            cz /= cnt
            for a in range(nbr_ptr[i], nbr_ptr[i + 1]):
                j = nbr_idx[a]
                dx = points[j, 0] - cx
                dy = points[j, 1] - cy
                dz = points[j, 2] - cz
                o[i, 0] += dx * dx
                o[i, 1] += dx * dy
                o[i, 2] += dx * dz
                o[i, 3] += dy * dy
                o[i, 4] += dy * dz
                o[i, 5] += dz * dz
    return out


cdef inline int _bin_unit(double x, int bins) nogil:
    cdef int b = <int>floor((x + 1.0) * 0.5 * bins)
    if b < 0:
        return 0
    if b >= bins:
        return bins - 1
    return b


cdef inline int _bin_angle(double th, int bins) nogil:
    cdef int b
    if th <= -M_PI:
        return bins - 1
    b = <int>floor((th + M_PI) / (2.0 * M_PI) * bins)
    if b < 0:
        return 0
    if b >= bins:
        return bins - 1
    return b


def spfh_batch(const double[:, ::1] points, const double[:, ::1] normals, const int64_t[::1] centers,
               const int64_t[::1] nbr_idx, const int64_t[::1] nbr_ptr, int bins):
    """SPFH percent histograms ``(m, 3 * bins)`` for each center."""
    cdef Py_ssize_t m = centers.shape[0], ci, a, i, j
    cdef double d[3], u[3], nj[3], v[3], w[3]
    cdef double dist, vn, alpha, phi, theta, scale
    cdef int valid
    out = np.zeros((m, 3 * bins), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for ci in range(m):
            i = centers[ci]
            u[0] = normals[i, 0]
            u[1] = normals[i, 1]
            u[2] = normals[i, 2]
            valid = 0
            for a in range(nbr_ptr[ci], nbr_ptr[ci + 1]):
                j = nbr_idx[a]
                if j == i:
                    continue
                d[0] = points[j, 0] - points[i, 0]
                d[1] = points[j, 1] - points[i, 1]
                d[2] = points[j, 2] - points[i, 2]
                dist = sqrt(_dot(d, d))
                if dist < 1e-12:
                    continue
                _cross(d, u, v)
                vn = sqrt(_dot(v, v))
                if vn < 1e-9 * dist:
                    continue
                v[0] /= vn
                v[1] /= vn
                v[2] /= vn
                _cross(u, v, w)
                nj[0] = normals[j, 0]
                nj[1] = normals[j, 1]
                nj[2] = normals[j, 2]
                alpha = _dot(v, nj)
                phi = _dot(u, d) / dist
                theta = atan2(_dot(w, nj), _dot(u, nj))
                o[ci, _bin_unit(alpha, bins)] += 1.0
                o[ci, bins + _bin_unit(phi, bins)] += 1.0
                o[ci, 2 * bins + _bin_angle(theta, bins)] += 1.0
                valid += 1
            if valid > 0:
                scale = 100.0 / valid
                for a in range(3 * bins):
                    o[ci, a] *= scale
    return out


def ndt_accumulate(const double[:, ::1] p, const double[:, ::1] x, const int64_t[::1] vid,
                   const double[:, ::1] means, const double[:, ::1] icov, const double[::1] const,
                   const double[:, ::1] rot):
    """Log-likelihood and its pose gradient over points with a voxel id >= 0.

    Gradient order is (translation, rotation vector) for an increment
    right-multiplied onto the current pose.
    """
    cdef Py_ssize_t n = p.shape[0], i, k
    cdef double score = 0.0
    cdef double g[6]
    cdef double dd[3], q[3], rq[3]
    cdef int64_t hits = 0
    for k in range(6):
        g[k] = 0.0
    with nogil:
        for i in range(n):
            k = vid[i]
            if k < 0:
                continue
            hits += 1
            dd[0] = x[i, 0] - means[k, 0]
            dd[1] = x[i, 1] - means[k, 1]
            dd[2] = x[i, 2] - means[k, 2]
            q[0] = icov[k, 0] * dd[0] + icov[k, 1] * dd[1] + icov[k, 2] * dd[2]
            q[1] = icov[k, 1] * dd[0] + icov[k, 3] * dd[1] + icov[k, 4] * dd[2]
            q[2] = icov[k, 2] * dd[0] + icov[k, 4] * dd[1] + icov[k, 5] * dd[2]
            score += const[k] - 0.5 * (dd[0] * q[0] + dd[1] * q[1] + dd[2] * q[2])
            rq[0] = rot[0, 0] * q[0] + rot[1, 0] * q[1] + rot[2, 0] * q[2]
            rq[1] = rot[0, 1] * q[0] + rot[1, 1] * q[1] + rot[2, 1] * q[2]
            rq[2] = rot[0, 2] * q[0] + rot[1, 2] * q[1] + rot[2, 2] * q[2]
            g[0] -= rq[0]
            g[1] -= rq[1]
            g[2] -= rq[2]
            g[3] += rq[1] * p[i, 2] - rq[2] * p[i, 1]
            g[4] += rq[2] * p[i, 0] - rq[0] * p[i, 2]
            g[5] += rq[0] * p[i, 1] - rq[1] * p[i, 0]
    grad = np.array([g[0], g[1], g[2], g[3], g[4], g[5]], dtype=np.float64)
    return score, grad, hits
