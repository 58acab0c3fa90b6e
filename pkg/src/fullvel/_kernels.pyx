# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. See ``_pykernels.py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, acos, cos, floor, INFINITY, NAN, fabs

cnp.import_array()

cdef double MIN_RANGE = 1e-6


cdef inline double _det3(double[3][3] m) nogil:
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


cdef double _cond2(double[3][3] m) nogil:
    # 2-norm condition number from the eigenvalues of M^T M. The largest
    # eigenvalue comes from the trigonometric closed form; the smallest is
    # recovered as det(M)^2 / (lmax * lmid) to keep relative accuracy.
    cdef double g[3][3]
    cdef int i, j, k
    for i in range(3):
        for j in range(3):
            g[i][j] = 0.0
            for k in range(3):
                g[i][j] += m[k][i] * m[k][j]
    cdef double tr = g[0][0] + g[1][1] + g[2][2]
    cdef double q = tr / 3.0
    cdef double p1 = g[0][1] * g[0][1] + g[0][2] * g[0][2] + g[1][2] * g[1][2]
    cdef double p2 = ((g[0][0] - q) * (g[0][0] - q) + (g[1][1] - q) * (g[1][1] - q)
                      + (g[2][2] - q) * (g[2][2] - q) + 2.0 * p1)
    cdef double p = sqrt(p2 / 6.0)
    cdef double lmax, r, phi
    cdef double bm[3][3]
    if p == 0.0:
        lmax = q
    else:
        for i in range(3):
            for j in range(3):
                bm[i][j] = (g[i][j] - (q if i == j else 0.0)) / p
        r = _det3(bm) / 2.0
        if r <= -1.0:
            phi = 3.141592653589793 / 3.0
        elif r >= 1.0:
            phi = 0.0
        else:
            phi = acos(r) / 3.0
        lmax = q + 2.0 * p * cos(phi)
    if lmax <= 0.0:
        return INFINITY
    cdef double dm = _det3(m)
    cdef double prod = dm * dm / lmax
    cdef double s = tr - lmax
    cdef double disc = s * s - 4.0 * prod
    if disc < 0.0:
        disc = 0.0
    cdef double lmid = 0.5 * (s + sqrt(disc))
    if lmid <= 0.0 or prod <= 0.0:
        return INFINITY
    cdef double lmin = prod / lmid
    return sqrt(lmax / lmin)


def solve_batch(R_BA, t_BA, radar_origin, ego_velocity, uv_q, depth_q, uv_p,
                rdot, raw_mask, double dt, double cond_limit):
    cdef const double[:, ::1] R = np.ascontiguousarray(R_BA, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(t_BA, dtype=np.float64).ravel()
    cdef const double[::1] org = np.ascontiguousarray(radar_origin, dtype=np.float64).ravel()
    cdef const double[::1] ego = np.ascontiguousarray(ego_velocity, dtype=np.float64).ravel()
    cdef const double[:, ::1] uq = np.ascontiguousarray(uv_q, dtype=np.float64).reshape(-1, 2)
    cdef const double[::1] dq = np.ascontiguousarray(depth_q, dtype=np.float64).ravel()
    cdef const double[:, ::1] up = np.ascontiguousarray(uv_p, dtype=np.float64).reshape(-1, 2)
    cdef const double[::1] rd = np.ascontiguousarray(rdot, dtype=np.float64).ravel()
    cdef const cnp.uint8_t[::1] raw = np.ascontiguousarray(raw_mask, dtype=np.uint8).ravel()
    cdef Py_ssize_t n = dq.shape[0]

    vel_a = np.empty((n, 3))
    cond_a = np.empty(n)
    dp_a = np.empty(n)
    rhat_a = np.empty((n, 3))
    rdu_a = np.empty(n)
    status_a = np.zeros(n, dtype=np.int8)
    cdef double[:, ::1] vel = vel_a
    cdef double[::1] cond = cond_a
    cdef double[::1] dp = dp_a
    cdef double[:, ::1] rhat = rhat_a
    cdef double[::1] rdu = rdu_a
    cdef cnp.int8_t[::1] status = status_a

    cdef Py_ssize_t i
    cdef int a, c
    cdef double d, u, v, rng, qa[3], qb[3], ray[3], b[3], x[3], res[3]
    cdef double m[3][3], c0[3], c1[3], c2[3], det, cn
    with nogil:
        for i in range(n):
            d = dq[i]
            qa[0] = uq[i, 0] * d
            qa[1] = uq[i, 1] * d
            qa[2] = d
            for a in range(3):
                ray[a] = qa[a] - org[a]
            rng = sqrt(ray[0] * ray[0] + ray[1] * ray[1] + ray[2] * ray[2])
            for a in range(3):
                rhat[i, a] = ray[a] / rng
            rdu[i] = rd[i]
            if raw[i]:
                rdu[i] = rd[i] + (rhat[i, 0] * ego[0] + rhat[i, 1] * ego[1] + rhat[i, 2] * ego[2])
            for a in range(3):
                qb[a] = R[a, 0] * qa[0] + R[a, 1] * qa[1] + R[a, 2] * qa[2] + t[a]
            vel[i, 0] = NAN
            vel[i, 1] = NAN
            vel[i, 2] = NAN
            cond[i] = INFINITY
            if not (d > 0):
                status[i] = 3
            elif not (rng > MIN_RANGE):
                status[i] = 2
            else:
                u = up[i, 0]
                v = up[i, 1]
                for a in range(3):
                    m[0][a] = R[0, a] - u * R[2, a]
                    m[1][a] = R[1, a] - v * R[2, a]
                    m[2][a] = rhat[i, a]
                b[0] = (qb[0] - u * qb[2]) / dt
                b[1] = (qb[1] - v * qb[2]) / dt
                b[2] = rdu[i]
                cn = _cond2(m)
                cond[i] = cn
                if not (cn <= cond_limit):
                    status[i] = 1
                else:
                    c0[0] = m[1][1] * m[2][2] - m[1][2] * m[2][1]
                    c0[1] = m[1][2] * m[2][0] - m[1][0] * m[2][2]
                    c0[2] = m[1][0] * m[2][1] - m[1][1] * m[2][0]
                    c1[0] = m[2][1] * m[0][2] - m[2][2] * m[0][1]
                    c1[1] = m[2][2] * m[0][0] - m[2][0] * m[0][2]
                    c1[2] = m[2][0] * m[0][1] - m[2][1] * m[0][0]
                    c2[0] = m[0][1] * m[1][2] - m[0][2] * m[1][1]
                    c2[1] = m[0][2] * m[1][0] - m[0][0] * m[1][2]
                    c2[2] = m[0][0] * m[1][1] - m[0][1] * m[1][0]
                    det = m[0][0] * c0[0] + m[0][1] * c0[1] + m[0][2] * c0[2]
                    for a in range(3):
                        x[a] = (b[0] * c0[a] + b[1] * c1[a] + b[2] * c2[a]) / det
                    for c in range(3):
                        res[c] = b[c] - (m[c][0] * x[0] + m[c][1] * x[1] + m[c][2] * x[2])
                    for a in range(3):
                        vel[i, a] = x[a] + (res[0] * c0[a] + res[1] * c1[a] + res[2] * c2[a]) / det
            dp[i] = qb[2] - (R[2, 0] * vel[i, 0] + R[2, 1] * vel[i, 1] + R[2, 2] * vel[i, 2]) * dt
    return vel_a, cond_a, dp_a, rhat_a, rdu_a, status_a


def bilinear_flow(vectors, valid, px):
    cdef const double[:, :, ::1] vec = np.ascontiguousarray(vectors, dtype=np.float64)
    cdef const cnp.uint8_t[:, ::1] ok = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef const double[:, ::1] p = np.ascontiguousarray(px, dtype=np.float64).reshape(-1, 2)
    cdef Py_ssize_t h = ok.shape[0], w = ok.shape[1], n = p.shape[0]
    out_a = np.full((n, 2), np.nan)
    status_a = np.zeros(n, dtype=np.int8)
    cdef double[:, ::1] out = out_a
    cdef cnp.int8_t[::1] status = status_a
    cdef Py_ssize_t i, k, x0, y0, xs[4], ys[4]
    cdef double x, y, ax, ay, wts[4], fu, fv
    cdef bint bad
    with nogil:
        for i in range(n):
            x = p[i, 0]
            y = p[i, 1]
            if not (x >= 0 and x <= w - 1 and y >= 0 and y <= h - 1):
                status[i] = 1
                continue
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            if x0 > w - 2:
                x0 = w - 2 if w >= 2 else 0
            if y0 > h - 2:
                y0 = h - 2 if h >= 2 else 0
            ax = x - x0
            ay = y - y0
            xs[0] = x0; ys[0] = y0; wts[0] = (1 - ax) * (1 - ay)
            xs[1] = x0 + 1 if x0 + 1 < w else w - 1; ys[1] = y0; wts[1] = ax * (1 - ay)
            xs[2] = x0; ys[2] = y0 + 1 if y0 + 1 < h else h - 1; wts[2] = (1 - ax) * ay
            xs[3] = xs[1]; ys[3] = ys[2]; wts[3] = ax * ay
            bad = False
            fu = 0.0
            fv = 0.0
            for k in range(4):
                if wts[k] > 0:
                    if not ok[ys[k], xs[k]]:
                        bad = True
                        break
                    fu = fu + wts[k] * vec[ys[k], xs[k], 0]
                    fv = fv + wts[k] * vec[ys[k], xs[k], 1]
            if bad:
                status[i] = 2
            else:
                out[i, 0] = fu
                out[i, 1] = fv
    return out_a, status_a


def raycast_boxes(double fx, double fy, double cx, double cy, int width, int height,
                  rotations, centers, half_extents):
    cdef const double[:, :, ::1] rot = np.ascontiguousarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    cdef const double[:, ::1] cen = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, ::1] hx = np.ascontiguousarray(half_extents, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t nb = rot.shape[0]
    out_a = np.full((nb, height, width), np.inf)
    cdef double[:, :, ::1] out = out_a
    cdef Py_ssize_t bi, r, col
    cdef int a
    cdef double o[3], dr[3], dirc[3], tmin, tmax, t1, t2, lo, hi
    cdef bint miss
    with nogil:
        for bi in range(nb):
            for a in range(3):
                o[a] = -(rot[bi, 0, a] * cen[bi, 0] + rot[bi, 1, a] * cen[bi, 1]
                         + rot[bi, 2, a] * cen[bi, 2])
            for r in range(height):
                dirc[1] = (r - cy) / fy
                for col in range(width):
                    dirc[0] = (col - cx) / fx
                    dirc[2] = 1.0
                    for a in range(3):
                        dr[a] = rot[bi, 0, a] * dirc[0] + rot[bi, 1, a] * dirc[1] + rot[bi, 2, a] * dirc[2]
                    tmin = -INFINITY
                    tmax = INFINITY
                    miss = False
                    for a in range(3):
                        if dr[a] == 0.0:
                            if fabs(o[a]) > hx[bi, a]:
                                miss = True
                            continue
                        t1 = (-hx[bi, a] - o[a]) / dr[a]
                        t2 = (hx[bi, a] - o[a]) / dr[a]
                        lo = t1 if t1 < t2 else t2
                        hi = t2 if t1 < t2 else t1
                        if lo > tmin:
                            tmin = lo
                        if hi < tmax:
                            tmax = hi
                    if not miss and tmin <= tmax and tmin > 0:
                        out[bi, r, col] = tmin
    return out_a


def synthesize_flow(double fx, double fy, double cx, double cy, int width, int height,
                    ids, depth, body_velocity, R_wa, t_wa, R_wb, t_wb, double dt):
    cdef const cnp.int64_t[:, ::1] idv = np.ascontiguousarray(ids, dtype=np.int64)
    cdef const double[:, ::1] dep = np.ascontiguousarray(depth, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(body_velocity, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, ::1] Ra = np.ascontiguousarray(R_wa, dtype=np.float64)
    cdef const double[::1] ta = np.ascontiguousarray(t_wa, dtype=np.float64).ravel()
    cdef const double[:, ::1] Rb = np.ascontiguousarray(R_wb, dtype=np.float64)
    cdef const double[::1] tb = np.ascontiguousarray(t_wb, dtype=np.float64).ravel()
    out_a = np.empty((height, width, 2))
    cdef double[:, :, ::1] out = out_a
    cdef Py_ssize_t r, c
    cdef int a, j
    cdef long long bid
    cdef double ray[3], xw[3], pb[3], d, z
    with nogil:
        for r in range(height):
            ray[1] = (r - cy) / fy
            for c in range(width):
                ray[0] = (c - cx) / fx
                ray[2] = 1.0
                bid = idv[r, c]
                if bid >= -1:
                    d = dep[r, c]
                    for a in range(3):
                        xw[a] = (Ra[a, 0] * ray[0] + Ra[a, 1] * ray[1] + Ra[a, 2] * ray[2]) * d + ta[a]
                    if bid >= 0:
                        for a in range(3):
                            xw[a] = xw[a] - bv[bid, a] * dt
                    for a in range(3):
                        xw[a] = xw[a] - tb[a]
                else:
                    for a in range(3):
                        xw[a] = Ra[a, 0] * ray[0] + Ra[a, 1] * ray[1] + Ra[a, 2] * ray[2]
                for j in range(3):
                    pb[j] = Rb[0, j] * xw[0] + Rb[1, j] * xw[1] + Rb[2, j] * xw[2]
                z = pb[2]
                if z > 0:
                    out[r, c, 0] = pb[0] / z * fx + cx - c
                    out[r, c, 1] = pb[1] / z * fy + cy - r
                else:
                    out[r, c, 0] = NAN
                    out[r, c, 1] = NAN
    return out_a
