# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled triangulation kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY, NAN

cnp.import_array()

BACKEND = "cython"
cdef double _MIN_Z = 1e-9


def reprojection_errors(points, rot, trans, uv, intr):
    cdef const double[:, ::1] P = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rot, dtype=np.float64)
    cdef const double[:, ::1] T = np.ascontiguousarray(trans, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(uv, dtype=np.float64)
    cdef double fx = intr[0], fy = intr[1], cx = intr[2], cy = intr[3]
    cdef Py_ssize_t m = P.shape[0], n = R.shape[0], a, b
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] E = out
    cdef double x, y, z, du, dv
    for a in range(m):
        for b in range(n):
            z = R[b, 2, 0] * P[a, 0] + R[b, 2, 1] * P[a, 1] + R[b, 2, 2] * P[a, 2] + T[b, 2]
            if z <= _MIN_Z:
                E[a, b] = INFINITY
                continue
            x = R[b, 0, 0] * P[a, 0] + R[b, 0, 1] * P[a, 1] + R[b, 0, 2] * P[a, 2] + T[b, 0]
            y = R[b, 1, 0] * P[a, 0] + R[b, 1, 1] * P[a, 1] + R[b, 1, 2] * P[a, 2] + T[b, 1]
            du = fx * x / z + cx - U[b, 0]
            dv = fy * y / z + cy - U[b, 1]
            E[a, b] = sqrt(du * du + dv * dv)
    return out


def score_candidates(points, rot, trans, uv, intr, double tau):
    cdef const double[:, ::1] P = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rot, dtype=np.float64)
    cdef const double[:, ::1] T = np.ascontiguousarray(trans, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(uv, dtype=np.float64)
    cdef double fx = intr[0], fy = intr[1], cx = intr[2], cy = intr[3]
    cdef Py_ssize_t m = P.shape[0], n = R.shape[0], a, b
    counts = np.zeros(m, dtype=np.int64)
    mean = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] C = counts
    cdef double[::1] M = mean
    cdef double x, y, z, du, dv, e, s
    cdef cnp.int64_t c
    for a in range(m):
        c = 0
        s = 0.0
        for b in range(n):
            z = R[b, 2, 0] * P[a, 0] + R[b, 2, 1] * P[a, 1] + R[b, 2, 2] * P[a, 2] + T[b, 2]
            if z <= _MIN_Z:
                continue
            x = R[b, 0, 0] * P[a, 0] + R[b, 0, 1] * P[a, 1] + R[b, 0, 2] * P[a, 2] + T[b, 0]
            y = R[b, 1, 0] * P[a, 0] + R[b, 1, 1] * P[a, 1] + R[b, 1, 2] * P[a, 2] + T[b, 1]
            du = fx * x / z + cx - U[b, 0]
            dv = fy * y / z + cy - U[b, 1]
            e = sqrt(du * du + dv * dv)
            if e < tau:
                c += 1
                s += e
        C[a] = c
        M[a] = s / c if c > 0 else INFINITY
    return counts, mean


def pairwise_sampson(rot, trans, uv, intr, double min_baseline):
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rot, dtype=np.float64)
    cdef const double[:, ::1] T = np.ascontiguousarray(trans, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(uv, dtype=np.float64)
    cdef double fx = intr[0], fy = intr[1], cx = intr[2], cy = intr[3]
    cdef Py_ssize_t n = R.shape[0], i, j, a, b, c
    out = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef double rij[3][3]
    cdef double tij[3]
    cdef double e[3][3]
    cdef double xi[3]
    cdef double xj[3]
    cdef double l[3]
    cdef double lt[3]
    cdef double s, alg, denom
    for i in range(n):
        O[i, i] = NAN
        # normalised coordinates: with E = [t]x R, F = K^-T E K^-1
        xi[0] = (U[i, 0] - cx) / fx
        xi[1] = (U[i, 1] - cy) / fy
        xi[2] = 1.0
        for j in range(i + 1, n):
            for a in range(3):
                for b in range(3):
                    s = 0.0
                    for c in range(3):
                        s += R[j, a, c] * R[i, b, c]
                    rij[a][b] = s
            for a in range(3):
                tij[a] = T[j, a] - (rij[a][0] * T[i, 0] + rij[a][1] * T[i, 1] + rij[a][2] * T[i, 2])
            if sqrt(tij[0] * tij[0] + tij[1] * tij[1] + tij[2] * tij[2]) < min_baseline:
                O[i, j] = NAN
                O[j, i] = NAN
                continue
            for b in range(3):
                e[0][b] = -tij[2] * rij[1][b] + tij[1] * rij[2][b]
                e[1][b] = tij[2] * rij[0][b] - tij[0] * rij[2][b]
                e[2][b] = -tij[1] * rij[0][b] + tij[0] * rij[1][b]
            xj[0] = (U[j, 0] - cx) / fx
            xj[1] = (U[j, 1] - cy) / fy
            xj[2] = 1.0
            for a in range(3):
                l[a] = e[a][0] * xi[0] + e[a][1] * xi[1] + e[a][2] * xi[2]
                lt[a] = e[0][a] * xj[0] + e[1][a] * xj[1] + e[2][a] * xj[2]
            alg = l[0] * xj[0] + l[1] * xj[1] + l[2] * xj[2]
            # pixel-space line gradients: F u_i = K^-T l, so its first two
            # entries are l[0]/fx, l[1]/fy (and alg is invariant)
            denom = (l[0] / fx) ** 2 + (l[1] / fy) ** 2 + (lt[0] / fx) ** 2 + (lt[1] / fy) ** 2
            if denom > 0:
                s = fabs(alg) / sqrt(denom)
            else:
                s = 0.0 if alg == 0 else INFINITY
            O[i, j] = s
            O[j, i] = s
    return out


def huber_system(q, rot, trans, uv, intr, double delta):
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rot, dtype=np.float64)
    cdef const double[:, ::1] T = np.ascontiguousarray(trans, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(uv, dtype=np.float64)
    cdef double fx = intr[0], fy = intr[1], cx = intr[2], cy = intr[3]
    cdef double q0 = q[0], q1 = q[1], q2 = q[2]
    cdef Py_ssize_t n = R.shape[0], k, a, b
    err_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] err = err_arr
    jtj_arr = np.zeros((3, 3), dtype=np.float64)
    jtr_arr = np.zeros(3, dtype=np.float64)
    cdef double[:, ::1] H = jtj_arr
    cdef double[::1] g = jtr_arr
    cdef double x, y, z, ru, rv, e, w, cost = 0.0
    cdef double ju[3]
    cdef double jv[3]
    cdef double pu0, pu2, pv1, pv2
    for k in range(n):
        z = R[k, 2, 0] * q0 + R[k, 2, 1] * q1 + R[k, 2, 2] * q2 + T[k, 2]
        if z <= _MIN_Z:
            err_arr[:] = np.inf
            return np.inf, np.zeros((3, 3)), np.zeros(3), err_arr
        x = R[k, 0, 0] * q0 + R[k, 0, 1] * q1 + R[k, 0, 2] * q2 + T[k, 0]
        y = R[k, 1, 0] * q0 + R[k, 1, 1] * q1 + R[k, 1, 2] * q2 + T[k, 1]
        ru = fx * x / z + cx - U[k, 0]
        rv = fy * y / z + cy - U[k, 1]
        e = sqrt(ru * ru + rv * rv)
        err[k] = e
        if e <= delta:
            cost += 0.5 * e * e
            w = 1.0
        else:
            cost += delta * (e - 0.5 * delta)
            w = delta / e
        pu0 = fx / z
        pu2 = -fx * x / (z * z)
        pv1 = fy / z
        pv2 = -fy * y / (z * z)
        for a in range(3):
            ju[a] = pu0 * R[k, 0, a] + pu2 * R[k, 2, a]
            jv[a] = pv1 * R[k, 1, a] + pv2 * R[k, 2, a]
        for a in range(3):
            g[a] += w * (ru * ju[a] + rv * jv[a])
            for b in range(3):
                H[a, b] += w * (ju[a] * ju[b] + jv[a] * jv[b])
    return cost, jtj_arr, jtr_arr, err_arr
