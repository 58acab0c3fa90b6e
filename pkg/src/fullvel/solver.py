"""Closed-form full velocity of a radar return from Doppler plus optical flow.

A radar return ``q`` at time A moved from ``p`` at an earlier time B with a
constant velocity ``m``. Backward optical flow gives the normalized image
coordinates ``(u_p, v_p)`` of ``p`` in camera B, the radar gives ``q`` (and
hence its depth ``d_q``) and the radial speed ``r_dot = r_hat . m``.
Eliminating the unknown depth of ``p`` leaves three linear equations in ``m``
(expressed in camera frame A)::

    [ R1 - u_p R3 ]       [ (qB1 - u_p qB3) / dt ]
    [ R2 - v_p R3 ] m  =  [ (qB2 - v_p qB3) / dt ]
    [   r_hat^T   ]       [        r_dot         ]

where ``R`` is the rotation of ``T_BA`` and ``qB = T_BA q``. The depth of
``p`` follows as ``d_p = qB3 - R3 . m dt``. A negative ``dt`` covers flow
toward a later image.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    DegenerateDirection,
    IllConditioned,
    InvalidFlow,
    NonPositiveDepth,
    OutOfBounds,
    ValidationError,
    ZeroDt,
)
from .frames import (
    CameraIntrinsics,
    RigidTransform,
    normalize_pixel,
    project_points,
    transform_point,
)

CONDITION_LIMIT = 1e8
MIN_RANGE = 1e-6
NONPOSITIVE_PREVIOUS_DEPTH = "NonPositivePreviousDepth"


class DopplerKind(enum.Enum):
    EGO_COMPENSATED = "ego_compensated"
    RAW = "raw"


class SolveStatus(enum.IntEnum):
    OK = 0
    ILL_CONDITIONED = 1
    DEGENERATE_DIRECTION = 2
    NONPOSITIVE_DEPTH = 3
    OUT_OF_BOUNDS = 4
    INVALID_FLOW = 5
    OCCLUDED = 6
    NO_FLOW = 7

    @property
    def label(self) -> str:
        return _STATUS_LABELS[self]

    @classmethod
    def from_label(cls, text: str) -> SolveStatus:
        for k, v in _STATUS_LABELS.items():
            if v == text:
                return k
        raise ValueError(f"unknown status {text!r}")


_STATUS_LABELS = {
    SolveStatus.OK: "OK",
    SolveStatus.ILL_CONDITIONED: "IllConditioned",
    SolveStatus.DEGENERATE_DIRECTION: "DegenerateDirection",
    SolveStatus.NONPOSITIVE_DEPTH: "NonPositiveDepth",
    SolveStatus.OUT_OF_BOUNDS: "OutOfBounds",
    SolveStatus.INVALID_FLOW: "InvalidFlow",
    SolveStatus.OCCLUDED: "Occluded",
    SolveStatus.NO_FLOW: "NoFlow",
}


def _vec3(v, name) -> np.ndarray:
    a = np.array(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValidationError(f"{name} must be a 3-vector")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} must be finite")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RadarReturn:
    """One radar detection in the radar frame.

    ``gt_*`` fields are ground truth carried along by simulated or labelled
    data; ``gt_velocity`` is expressed in the radar frame.
    """

    position: np.ndarray
    radial_speed: float
    doppler_kind: DopplerKind = DopplerKind.EGO_COMPENSATED
    timestamp: float = 0.0
    gt_body_id: int | None = None
    gt_velocity: np.ndarray | None = None
    gt_occluded: bool = False

    def __post_init__(self):
        pos = _vec3(self.position, "position")
        if not np.linalg.norm(pos) > 0:
            raise ValidationError("a return at the sensor origin is invalid")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "radial_speed", float(self.radial_speed))
        object.__setattr__(self, "doppler_kind", DopplerKind(self.doppler_kind))
        if self.gt_velocity is not None:
            object.__setattr__(self, "gt_velocity", _vec3(self.gt_velocity, "gt_velocity"))


@dataclass(frozen=True, eq=False)
class EgoState:
    """Motion between the earlier capture B and the radar-synchronized capture A.

    ``camera_motion`` is ``T_BA`` (maps camera-A coordinates into camera B),
    ``ego_velocity`` is the radar sensor's own velocity in frame A (used only
    to compensate raw Doppler) and ``dt = t_A - t_B``.
    """

    camera_motion: RigidTransform
    ego_velocity: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "ego_velocity", _vec3(self.ego_velocity, "ego_velocity"))
        if self.dt == 0:
            raise ZeroDt("dt must be non-zero")
        object.__setattr__(self, "dt", float(self.dt))


class FlowField:
    """Dense backward flow: ``vectors[y, x]`` moves pixel ``(x, y)`` of the
    current image to its location in the other image.

    Invalid pixels are stored as NaN; any non-finite input vector is invalid.
    The arrays are read-only after construction.
    """

    def __init__(self, vectors, valid=None):
        vec = np.array(vectors)
        if vec.dtype not in (np.float32, np.float64):
            vec = vec.astype(np.float64)
        if vec.ndim != 3 or vec.shape[2] != 2 or vec.shape[0] < 1 or vec.shape[1] < 1:
            raise ValidationError(f"flow vectors must have shape (H, W, 2), got {vec.shape}")
        ok = np.all(np.isfinite(vec), axis=2)
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != ok.shape:
                raise ValidationError("validity mask does not match flow size")
            ok &= valid
        vec[~ok] = np.nan
        vec.setflags(write=False)
        ok.setflags(write=False)
        self.vectors = vec
        self.valid = ok

    @classmethod
    def zeros(cls, width: int, height: int) -> FlowField:
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def constant(cls, width: int, height: int, flow) -> FlowField:
        return cls(np.broadcast_to(np.asarray(flow, dtype=np.float64), (height, width, 2)))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return (self.vectors.dtype == other.vectors.dtype
                and np.array_equal(self.valid, other.valid)
                and np.array_equal(self.vectors, other.vectors, equal_nan=True))

    __hash__ = None

    def __repr__(self):
        return f"FlowField({self.width}x{self.height}, {int(self.valid.sum())} valid)"


@dataclass(frozen=True)
class FullVelocityEstimate:
    """Solved velocity (camera frame A) with diagnostics.

    ``flow_residual`` is the larger absolute residual of the two flow rows,
    ``previous_depth`` is the implied depth of the earlier point in camera B.
    """

    velocity: np.ndarray
    condition_number: float
    radial_residual: float
    flow_residual: float
    previous_depth: float
    r_hat: np.ndarray
    radial_speed: float
    warnings: tuple[str, ...] = field(default=())


def radial_unit_vector(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not n > MIN_RANGE:
        raise DegenerateDirection(f"range {n:g} m is too small to define a direction")
    return q / n


def compensate_doppler(r: RadarReturn, r_hat, ego_velocity) -> float:
    """Ego-compensated radial speed. Raw Doppler measures ``r_hat . (m - c)``."""
    if r.doppler_kind is DopplerKind.EGO_COMPENSATED:
        return r.radial_speed
    return r.radial_speed + float(np.dot(r_hat, ego_velocity))


def lookup_flow(flow: FlowField, k: CameraIntrinsics, q_pixel) -> np.ndarray:
    """Normalized coordinates of ``q_pixel`` after following the flow."""
    px = np.asarray(q_pixel, dtype=np.float64).reshape(1, 2)
    vec, status = kernels.bilinear_flow(flow.vectors, flow.valid, px)
    if status[0] == kernels.FLOW_OUT_OF_BOUNDS:
        raise OutOfBounds(f"pixel {px[0].tolist()} outside {flow.width}x{flow.height} flow")
    if status[0] == kernels.FLOW_INVALID:
        raise InvalidFlow(f"flow is invalid near pixel {px[0].tolist()}")
    return normalize_pixel(k, px[0] + vec[0])


def build_constraints(uv_p, q_B, cam_motion: RigidTransform, r_hat_A, radial_speed: float,
                      dt: float) -> tuple[np.ndarray, np.ndarray]:
    if dt == 0:
        raise ZeroDt("dt must be non-zero")
    u_p, v_p = (float(c) for c in uv_p)
    R = cam_motion.rotation
    q_B = np.asarray(q_B, dtype=np.float64)
    M = np.array([R[0] - u_p * R[2], R[1] - v_p * R[2], np.asarray(r_hat_A, dtype=np.float64)])
    rhs = np.array([(q_B[0] - u_p * q_B[2]) / dt, (q_B[1] - v_p * q_B[2]) / dt, radial_speed])
    return M, rhs


@dataclass(frozen=True)
class BatchSolution:
    """Per-return results of :func:`solve_batch`; failed rows hold NaN velocity."""

    velocity: np.ndarray
    condition_number: np.ndarray
    previous_depth: np.ndarray
    r_hat: np.ndarray
    radial_speed: np.ndarray
    status: np.ndarray
    raw_projection: np.ndarray
    assoc_pixel: np.ndarray
    depth: np.ndarray

    def __len__(self):
        return self.status.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return self.status == SolveStatus.OK


def solve_batch(positions, radial_speeds, raw_mask, flow: FlowField, k: CameraIntrinsics,
                ego: EgoState, radar_extrinsics: RigidTransform,
                assoc_pixels=None, cond_limit: float = CONDITION_LIMIT) -> BatchSolution:
    """Vectorized solve for many returns of one frame pair.

    ``positions`` are radar-frame points ``(N, 3)``. ``assoc_pixels`` replaces
    the image location of each return (its measured depth is kept); it
    defaults to the raw projection.
    """
    if ego.dt == 0:
        raise ZeroDt("dt must be non-zero")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    q_A = transform_point(radar_extrinsics, pos)
    raw_px, depth = project_points(k, q_A)
    assoc = raw_px if assoc_pixels is None else np.asarray(assoc_pixels, dtype=np.float64).reshape(-1, 2)
    n = pos.shape[0]

    fvec, fstat = kernels.bilinear_flow(flow.vectors, flow.valid, assoc)
    uv_q = normalize_pixel(k, assoc)
    uv_p = normalize_pixel(k, assoc + fvec)
    T = ego.camera_motion
    vel, cond, d_p, r_hat, rdot, kstat = kernels.solve_batch(
        T.rotation, T.translation, radar_extrinsics.translation, ego.ego_velocity,
        uv_q, depth, uv_p, np.asarray(radial_speeds, dtype=np.float64).reshape(n),
        np.asarray(raw_mask, dtype=bool).reshape(n), float(ego.dt), float(cond_limit))

    status = np.full(n, SolveStatus.OK, dtype=np.int8)
    status[kstat == kernels.STATUS_ILL_CONDITIONED] = SolveStatus.ILL_CONDITIONED
    status[kstat == kernels.STATUS_DEGENERATE_DIRECTION] = SolveStatus.DEGENERATE_DIRECTION
    status[fstat == kernels.FLOW_INVALID] = SolveStatus.INVALID_FLOW
    status[fstat == kernels.FLOW_OUT_OF_BOUNDS] = SolveStatus.OUT_OF_BOUNDS
    status[~(depth > 0)] = SolveStatus.NONPOSITIVE_DEPTH
    bad = status != SolveStatus.OK
    vel[bad] = np.nan
    d_p[bad] = np.nan
    return BatchSolution(vel, cond, d_p, r_hat, rdot, status, raw_px, assoc, depth)


_RAISERS = {
    SolveStatus.NONPOSITIVE_DEPTH: lambda c: NonPositiveDepth("return is not in front of the camera"),
    SolveStatus.OUT_OF_BOUNDS: lambda c: OutOfBounds("associated pixel is outside the flow field"),
    SolveStatus.INVALID_FLOW: lambda c: InvalidFlow("flow is invalid at the associated pixel"),
    SolveStatus.DEGENERATE_DIRECTION: lambda c: DegenerateDirection("return coincides with the radar origin"),
    SolveStatus.ILL_CONDITIONED: lambda c: IllConditioned(c),
}


def solve_full_velocity(r: RadarReturn, flow: FlowField, k: CameraIntrinsics, ego: EgoState,
                        radar_extrinsics: RigidTransform, assoc_pixel=None,
                        cond_limit: float = CONDITION_LIMIT) -> FullVelocityEstimate:
    """Full 3D velocity of one return, in camera frame A.

    The return is placed at ``assoc_pixel`` (default: its raw projection)
    at its measured depth; the radial direction is taken from the radar
    origin to that point.
    """
    if ego.dt == 0:
        raise ZeroDt("dt must be non-zero")
    sol = solve_batch(r.position[None], [r.radial_speed], [r.doppler_kind is DopplerKind.RAW],
                      flow, k, ego, radar_extrinsics,
                      None if assoc_pixel is None else np.asarray(assoc_pixel, dtype=np.float64)[None],
                      cond_limit)
    st = SolveStatus(int(sol.status[0]))
    if st != SolveStatus.OK:
        raise _RAISERS[st](float(sol.condition_number[0]))

    m = sol.velocity[0]
    r_hat = sol.r_hat[0]
    rdot = float(sol.radial_speed[0])
    px = sol.assoc_pixel[0]
    uv_p = lookup_flow(flow, k, px)
    q_A = np.append(normalize_pixel(k, px) * sol.depth[0], sol.depth[0])
    q_B = transform_point(ego.camera_motion, q_A)
    M, rhs = build_constraints(uv_p, q_B, ego.camera_motion, r_hat, rdot, ego.dt)
    res = M @ m - rhs
    d_p = float(sol.previous_depth[0])
    return FullVelocityEstimate(
        velocity=m,
        condition_number=float(sol.condition_number[0]),
        radial_residual=float(res[2]),
        flow_residual=float(np.max(np.abs(res[:2]))),
        previous_depth=d_p,
        r_hat=r_hat,
        radial_speed=rdot,
        warnings=(NONPOSITIVE_PREVIOUS_DEPTH,) if not d_p > 0 else (),
    )


def solve_full_velocity_reversed(r: RadarReturn, flow: FlowField, k: CameraIntrinsics, ego: EgoState,
                                 radar_extrinsics: RigidTransform, assoc_pixel=None,
                                 cond_limit: float = CONDITION_LIMIT) -> FullVelocityEstimate:
    """Same solve when the flow points to a *later* image (``ego.dt < 0``)."""
    if ego.dt == 0:
        raise ZeroDt("dt must be non-zero")
    if ego.dt > 0:
        raise ValidationError("reversed solve expects dt < 0 (flow toward a later image)")
    return solve_full_velocity(r, flow, k, ego, radar_extrinsics, assoc_pixel, cond_limit)
