"""Pure-numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` argument for argument. They are used when the
compiled extension is unavailable or ``FULLVEL_PURE_PYTHON=1`` is set.
"""

from __future__ import annotations

import numpy as np

STATUS_OK = 0
STATUS_ILL_CONDITIONED = 1
STATUS_DEGENERATE_DIRECTION = 2
STATUS_NONPOSITIVE_DEPTH = 3

FLOW_OK = 0
FLOW_OUT_OF_BOUNDS = 1
FLOW_INVALID = 2

MIN_RANGE = 1e-6


def solve_batch(R_BA, t_BA, radar_origin, ego_velocity, uv_q, depth_q, uv_p,
                rdot, raw_mask, dt, cond_limit):
    """Closed-form full-velocity solve for a batch of returns sharing one frame pair.

    Returns ``(velocity, cond, d_p, r_hat, rdot_used, status)``. Rows whose
    status is not OK carry NaN velocity.
    """
    R = np.asarray(R_BA, dtype=np.float64)
    t = np.asarray(t_BA, dtype=np.float64)
    uv_q = np.asarray(uv_q, dtype=np.float64).reshape(-1, 2)
    uv_p = np.asarray(uv_p, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth_q, dtype=np.float64).ravel()
    rdot = np.asarray(rdot, dtype=np.float64).ravel()
    raw_mask = np.asarray(raw_mask, dtype=bool).ravel()
    n = d.shape[0]

    status = np.zeros(n, dtype=np.int8)
    q_A = np.column_stack([uv_q[:, 0] * d, uv_q[:, 1] * d, d])
    ray = q_A - np.asarray(radar_origin, dtype=np.float64)
    rng = np.linalg.norm(ray, axis=1)
    status[~(rng > MIN_RANGE)] = STATUS_DEGENERATE_DIRECTION
    status[~(d > 0)] = STATUS_NONPOSITIVE_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        r_hat = ray / rng[:, None]
    rdot_used = rdot + np.where(raw_mask, r_hat @ np.asarray(ego_velocity, dtype=np.float64), 0.0)

    q_B = q_A @ R.T + t
    u_p, v_p = uv_p[:, 0], uv_p[:, 1]
    M = np.empty((n, 3, 3))
    M[:, 0] = R[0] - u_p[:, None] * R[2]
    M[:, 1] = R[1] - v_p[:, None] * R[2]
    M[:, 2] = r_hat
    b = np.column_stack([(q_B[:, 0] - u_p * q_B[:, 2]) / dt,
                         (q_B[:, 1] - v_p * q_B[:, 2]) / dt,
                         rdot_used])

    ok = (status == STATUS_OK) & np.isfinite(M).all(axis=(1, 2))
    cond = np.full(n, np.inf)
    if ok.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            cond[ok] = np.linalg.cond(M[ok])
    cond[~np.isfinite(cond)] = np.inf
    status[(status == STATUS_OK) & ~(cond <= cond_limit)] = STATUS_ILL_CONDITIONED
    ok = status == STATUS_OK

    vel = np.full((n, 3), np.nan)
    if ok.any():
        Mo, bo = M[ok], b[ok]
        c0 = np.cross(Mo[:, 1], Mo[:, 2])
        c1 = np.cross(Mo[:, 2], Mo[:, 0])
        c2 = np.cross(Mo[:, 0], Mo[:, 1])
        det = np.einsum("ij,ij->i", Mo[:, 0], c0)
        x = (bo[:, 0:1] * c0 + bo[:, 1:2] * c1 + bo[:, 2:3] * c2) / det[:, None]
        res = bo - np.einsum("nij,nj->ni", Mo, x)
        x = x + (res[:, 0:1] * c0 + res[:, 1:2] * c1 + res[:, 2:3] * c2) / det[:, None]
        vel[ok] = x
    d_p = q_B[:, 2] - (vel @ R[2]) * dt
    return vel, cond, d_p, r_hat, rdot_used, status


def bilinear_flow(vectors, valid, px):
    """Bilinear flow sample at continuous pixels; returns ``(flow, status)``.

    Only pixels with non-zero interpolation weight contribute, so a query
    exactly on a pixel centre never reads its neighbours.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
    h, w = valid.shape
    x, y = px[:, 0], px[:, 1]
    n = px.shape[0]
    out = np.full((n, 2), np.nan)
    status = np.zeros(n, dtype=np.int8)

    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    status[~inb] = FLOW_OUT_OF_BOUNDS
    idx = np.flatnonzero(inb)
    if idx.size == 0:
        return out, status
    xi, yi = x[idx], y[idx]
    x0 = np.minimum(np.floor(xi), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(yi), max(h - 2, 0)).astype(np.intp)
    ax, ay = xi - x0, yi - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    acc = np.zeros((idx.size, 2))
    bad = np.zeros(idx.size, dtype=bool)
    for wgt, yy, xx in (((1 - ax) * (1 - ay), y0, x0), (ax * (1 - ay), y0, x1),
                        ((1 - ax) * ay, y1, x0), (ax * ay, y1, x1)):
        used = wgt > 0
        bad |= used & ~valid[yy, xx]
        acc += np.where(used[:, None], wgt[:, None] * vectors[yy, xx], 0.0)
    status[idx[bad]] = FLOW_INVALID
    good = idx[~bad]
    out[good] = acc[~bad]
    return out, status


def raycast_boxes(fx, fy, cx, cy, width, height, rotations, centers, half_extents):
    """Entry depth of each pixel-centre ray into each oriented box.

    ``rotations[b]`` maps box coordinates to camera coordinates and
    ``centers[b]`` is the box centre in the camera frame. The ray through
    pixel ``(x, y)`` is ``s * (u, v, 1)``; the returned depth is the ``s`` of
    the first hit (``inf`` on a miss, or when the camera is inside the box).
    """
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    half_extents = np.asarray(half_extents, dtype=np.float64).reshape(-1, 3)
    xs = (np.arange(width, dtype=np.float64) - cx) / fx
    ys = (np.arange(height, dtype=np.float64) - cy) / fy
    U, V = np.meshgrid(xs, ys)
    dirs = np.stack([U, V, np.ones_like(U)], axis=-1).reshape(-1, 3)
    out = np.full((rotations.shape[0], height, width), np.inf)
    for b in range(rotations.shape[0]):
        Rt = rotations[b].T
        o = -Rt @ centers[b]
        d = dirs @ Rt.T
        h = half_extents[b]
        tmin = np.full(d.shape[0], -np.inf)
        tmax = np.full(d.shape[0], np.inf)
        miss = np.zeros(d.shape[0], dtype=bool)
        for a in range(3):
            da = d[:, a]
            par = da == 0
            miss |= par & (abs(o[a]) > h[a])
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-h[a] - o[a]) / da
                t2 = (h[a] - o[a]) / da
            lo = np.where(par, -np.inf, np.minimum(t1, t2))
            hi = np.where(par, np.inf, np.maximum(t1, t2))
            tmin = np.maximum(tmin, lo)
            tmax = np.minimum(tmax, hi)
        hit = ~miss & (tmin <= tmax) & (tmin > 0)
        out[b].reshape(-1)[hit] = tmin[hit]
    return out


def synthesize_flow(fx, fy, cx, cy, width, height, ids, depth, body_velocity,
                    R_wa, t_wa, R_wb, t_wb, dt):
    """Backward flow of every pixel from camera A (time t_a) to camera B.

    ``ids >= 0`` selects a body whose world velocity is ``body_velocity[id]``;
    ``ids == -1`` is static geometry at ``depth``; any other id is a point at
    infinity. ``dt = t_a - t_b``. Pixels that land behind camera B are NaN.
    """
    ids = np.asarray(ids)
    depth = np.asarray(depth, dtype=np.float64)
    body_velocity = np.asarray(body_velocity, dtype=np.float64).reshape(-1, 3)
    R_wa = np.asarray(R_wa, dtype=np.float64)
    R_wb = np.asarray(R_wb, dtype=np.float64)
    xs = (np.arange(width, dtype=np.float64) - cx) / fx
    ys = (np.arange(height, dtype=np.float64) - cy) / fy
    U, V = np.meshgrid(xs, ys)
    rays = np.stack([U, V, np.ones_like(U)], axis=-1)

    vel = np.zeros((height, width, 3))
    body = ids >= 0
    if body.any():
        vel[body] = body_velocity[ids[body]]
    finite = ids >= -1
    d = np.where(finite, depth, 1.0)
    X_w = (rays * d[..., None]) @ R_wa.T + t_wa
    X_w = X_w - vel * dt
    X_b = (X_w - t_wb) @ R_wb
    D_b = rays @ (R_wa.T @ R_wb)
    P = np.where(finite[..., None], X_b, D_b)

    z = P[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = P[..., 0] / z * fx + cx
        py = P[..., 1] / z * fy + cy
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    flow = np.stack([px - cols, py - rows], axis=-1)
    flow[~(z > 0)] = np.nan
    return flow
