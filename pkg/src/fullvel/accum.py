"""Motion-compensated accumulation of radar points over several frames.

A point ``p_i`` seen at time ``t_i`` is first moved to the current time in
its own radar frame, ``p_0 = p_i + m (t_0 - t_i)``, and then carried into
the current radar frame by the known ego motion.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import MissingCorrespondence, ValidationError
from .frames import RigidTransform, compose, invert, transform_point

FLAG_OK = 0
FLAG_FALLBACK = 1  # velocity unavailable; ego-only compensation


class CompensationMode(enum.Enum):
    NONE = "none"
    RADIAL = "radial"
    FULL = "full"


@dataclass(frozen=True, eq=False)
class AccumulatedCloud:
    """Points in the current radar frame, ordered by (source frame, point index)."""

    positions: np.ndarray
    source_frame: np.ndarray
    source_timestamp: np.ndarray
    point_index: np.ndarray
    body_id: np.ndarray
    flags: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("accumulated positions must be finite")

    def __len__(self):
        return self.positions.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AccumulatedCloud):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("positions", "source_frame", "source_timestamp", "point_index", "body_id", "flags"))

    __hash__ = None


def compensate_point(p_i, velocity, t_0: float, t_i: float) -> np.ndarray:
    """``p_i + velocity * (t_0 - t_i)``; broadcasts over stacked points."""
    return np.asarray(p_i, dtype=np.float64) + np.asarray(velocity, dtype=np.float64) * (t_0 - t_i)


def radar_to_radar(frame_i, frame_0) -> RigidTransform:
    """Transform from frame ``i``'s radar coordinates into frame ``0``'s."""
    if frame_i is frame_0:
        return RigidTransform.identity()
    cam_i_to_world = invert(frame_i.ego_pose)
    T = compose(frame_0.ego_pose, compose(cam_i_to_world, frame_i.radar_extrinsics))
    return compose(invert(frame_0.radar_extrinsics), T)


def radial_velocities(frame) -> np.ndarray:
    """``r_dot * r_hat`` per return, in the radar frame (raw Doppler is ego-compensated)."""
    pos = frame.positions()
    if pos.shape[0] == 0:
        return np.zeros((0, 3))
    r_hat = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    rdot = frame.radial_speeds()
    raw = frame.raw_mask()
    if raw.any():
        v_r = frame.radar_extrinsics.rotation.T @ frame.radar_velocity
        rdot = rdot + np.where(raw, r_hat @ v_r, 0.0)
    return rdot[:, None] * r_hat


def accumulate(frames, horizon: int, mode: CompensationMode, velocities=None) -> AccumulatedCloud:
    """Merge the last ``horizon`` frames into the radar frame of ``frames[-1]``.

    ``velocities[i]`` is an ``(n_i, 3)`` radar-frame array for ``frames[i]``
    (or ``None``) and is required for ``FULL``. Rows that are not finite fall
    back to ego-only compensation and are flagged.
    """
    mode = CompensationMode(mode)
    if not 1 <= horizon <= len(frames):
        raise ValidationError(f"horizon {horizon} must lie in [1, {len(frames)}]")
    if mode is CompensationMode.FULL and velocities is None:
        raise ValidationError("full compensation needs per-point velocities")
    if velocities is not None and len(velocities) != len(frames):
        raise ValidationError("velocities must align with frames")
    current = frames[-1]
    first = len(frames) - horizon
    parts = {k: [] for k in ("pos", "frame", "ts", "idx", "body", "flag")}
    for i in range(first, len(frames)):
        f = frames[i]
        n = len(f.returns)
        if n == 0:
            continue
        pos = f.positions()
        flags = np.full(n, FLAG_OK, dtype=np.int8)
        if mode is CompensationMode.NONE:
            vel = np.zeros((n, 3))
        elif mode is CompensationMode.RADIAL:
            vel = radial_velocities(f)
        else:
            v = velocities[i]
            vel = np.full((n, 3), np.nan) if v is None else np.array(v, dtype=np.float64).reshape(n, 3)
            bad = ~np.all(np.isfinite(vel), axis=1)
            vel[bad] = 0.0
            flags[bad] = FLAG_FALLBACK
        p0 = compensate_point(pos, vel, current.timestamp, f.timestamp)
        parts["pos"].append(transform_point(radar_to_radar(f, current), p0))
        parts["frame"].append(np.full(n, f.index, dtype=np.int64))
        parts["ts"].append(np.full(n, f.timestamp))
        parts["idx"].append(np.arange(n, dtype=np.int64))
        parts["body"].append(np.array([-1 if r.gt_body_id is None else r.gt_body_id for r in f.returns],
                                      dtype=np.int64))
        parts["flag"].append(flags)
    if not parts["pos"]:
        return AccumulatedCloud(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64),
                                np.zeros(0, np.int64), np.zeros(0, np.int8))
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return AccumulatedCloud(cat["pos"], cat["frame"], cat["ts"], cat["idx"], cat["body"], cat["flag"])


def point_box_distances(cloud: AccumulatedCloud, boxes) -> np.ndarray:
    """Distance of each point to the box sharing its body id (0 inside)."""
    by_id = {b.body_id: b for b in boxes if b.body_id is not None}
    out = np.empty(len(cloud))
    for j, bid in enumerate(cloud.body_id):
        if bid < 0 or int(bid) not in by_id:
            raise MissingCorrespondence(f"point {j} (frame {cloud.source_frame[j]}, index "
                                        f"{cloud.point_index[j]}) has no GT box")
    for bid in np.unique(cloud.body_id):
        sel = cloud.body_id == bid
        out[sel] = by_id[int(bid)].distance(cloud.positions[sel])
    return out


def accumulation_error(cloud: AccumulatedCloud, boxes) -> float:
    """Mean point-to-box distance against the current-frame boxes."""
    if len(cloud) == 0:
        return float("nan")
    return float(np.mean(point_box_distances(cloud, boxes)))

