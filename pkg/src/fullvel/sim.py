"""Synthetic scenes with exact radar Doppler, dense flow and GT boxes.

World coordinates use the camera axis convention (+y down). Bodies are
cuboids moving at constant world velocity with a fixed yaw about +y. The ego
camera moves at a constant body-frame velocity and yaw rate. Every pixel is
ray cast against the bodies and an optional ground plane, so flow is exact
at every pixel centre; rays that hit nothing get the rotation-only flow of a
point at infinity.

Radar returns are taken at pixel-centre hits, which keeps the raw projection
on the pixel grid and makes the flow lookup exact. With ``see_through_prob``
a return may instead come from a body surface hidden behind another body.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .assoc import GtBox
from .errors import IdentityMismatch, ValidationError, ZeroDt
from .frames import CameraIntrinsics, RigidTransform, compose, invert, rot_y
from .solver import DopplerKind, EgoState, FlowField, RadarReturn

_FLOW_STREAM = 2
_SAMPLE_STREAM = 0
_NOISE_STREAM = 1


def _vec(v) -> np.ndarray:
    a = np.array(v, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BodyConfig:
    center: np.ndarray
    half_extents: np.ndarray
    velocity: np.ndarray
    yaw: float = 0.0
    surface_points: int = 10

    def __post_init__(self):
        for name in ("center", "half_extents", "velocity"):
            a = _vec(getattr(self, name))
            if a.shape != (3,) or not np.all(np.isfinite(a)):
                raise ValidationError(f"body {name} must be a finite 3-vector")
            object.__setattr__(self, name, a)
        if not np.all(self.half_extents > 0):
            raise ValidationError("body half extents must be positive")
        if self.surface_points < 0:
            raise ValidationError("surface_points must be >= 0")

    @property
    def rotation(self) -> np.ndarray:
        return rot_y(self.yaw)

    def center_at(self, t: float) -> np.ndarray:
        return self.center + self.velocity * t


@dataclass(frozen=True, eq=False)
class EgoConfig:
    """``initial_pose`` is camera-to-world at t = 0; velocity is in the camera frame."""

    initial_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "velocity", _vec(self.velocity))


@dataclass(frozen=True)
class SensorConfig:
    intrinsics: CameraIntrinsics
    radar_extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass(frozen=True)
class TimingConfig:
    frame_period: float = 0.1
    frame_count: int = 2
    start_time: float = 0.0


@dataclass(frozen=True)
class NoiseSpec:
    doppler_sigma: float = 0.0
    range_sigma: float = 0.0
    azimuth_sigma: float = 0.0
    elevation_sigma: float = 0.0
    flow_sigma: float = 0.0
    dropout_prob: float = 0.0

    def __post_init__(self):
        vals = dataclasses.astuple(self)
        if any(not v >= 0 for v in vals):
            raise ValidationError("noise parameters must be >= 0")
        if not self.dropout_prob < 1:
            raise ValidationError("dropout_prob must be < 1")

    @property
    def is_zero(self) -> bool:
        return not any(dataclasses.astuple(self))


@dataclass(frozen=True, eq=False)
class SceneConfig:
    bodies: tuple[BodyConfig, ...]
    sensors: SensorConfig
    ego: EgoConfig = field(default_factory=EgoConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    doppler_kind: DopplerKind = DopplerKind.EGO_COMPENSATED
    see_through_prob: float = 0.0
    ground_y: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "doppler_kind", DopplerKind(self.doppler_kind))
        if not self.timing.frame_period > 0:
            raise ValidationError("frame_period must be positive")
        if self.timing.frame_count < 2:
            raise ValidationError("frame_count must be >= 2 (flow needs a previous frame)")
        if not 0 <= self.see_through_prob <= 1:
            raise ValidationError("see_through_prob must lie in [0, 1]")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    def time(self, index: int) -> float:
        return self.timing.start_time + index * self.timing.frame_period


@dataclass(frozen=True, eq=False)
class SceneFrame:
    """One synchronized capture.

    ``ego_pose`` maps world to camera coordinates. ``radar_velocity`` is the
    radar's own velocity in the camera frame. ``flow`` maps this image to the
    previous frame's image and is ``None`` on the first frame. Boxes are in
    this frame's radar coordinates.
    """

    index: int
    timestamp: float
    ego_pose: RigidTransform
    radar_extrinsics: RigidTransform
    intrinsics: CameraIntrinsics
    radar_velocity: np.ndarray
    returns: tuple[RadarReturn, ...]
    boxes: tuple[GtBox, ...]
    flow: FlowField | None = None

    def __post_init__(self):
        object.__setattr__(self, "returns", tuple(self.returns))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "radar_velocity", _vec(self.radar_velocity))

    def positions(self) -> np.ndarray:
        return np.array([r.position for r in self.returns]).reshape(-1, 3)

    def radial_speeds(self) -> np.ndarray:
        return np.array([r.radial_speed for r in self.returns], dtype=np.float64)

    def raw_mask(self) -> np.ndarray:
        return np.array([r.doppler_kind is DopplerKind.RAW for r in self.returns], dtype=bool)

    def box_for(self, body_id) -> GtBox | None:
        for b in self.boxes:
            if b.body_id == body_id:
                return b
        return None


def ego_state_between(frame_a: SceneFrame, frame_b: SceneFrame) -> EgoState:
    """Motion from capture B to the radar-synchronized capture A."""
    return EgoState(compose(frame_b.ego_pose, invert(frame_a.ego_pose)),
                    frame_a.radar_velocity, frame_a.timestamp - frame_b.timestamp)


def frame_ego_state(frames, index: int) -> EgoState:
    return ego_state_between(frames[index], frames[index - 1])


# -- kinematics ---------------------------------------------------------------

def camera_to_world(config: SceneConfig, t: float) -> RigidTransform:
    ego = config.ego
    w = ego.yaw_rate
    tt = t - config.timing.start_time
    s = tt * np.sinc(w * tt / np.pi)
    c = 0.5 * w * tt * tt * np.sinc(w * tt / (2 * np.pi)) ** 2
    J = np.array([[s, 0.0, c], [0.0, tt, 0.0], [-c, 0.0, s]])
    R0 = ego.initial_pose.rotation
    return RigidTransform(R0 @ rot_y(w * tt), ego.initial_pose.translation + R0 @ (J @ ego.velocity))


def world_to_camera(config: SceneConfig, t: float) -> RigidTransform:
    return invert(camera_to_world(config, t))


def radar_velocity(config: SceneConfig) -> np.ndarray:
    """Radar origin velocity in the camera frame (constant over time)."""
    omega = np.array([0.0, config.ego.yaw_rate, 0.0])
    return config.ego.velocity + np.cross(omega, config.sensors.radar_extrinsics.translation)


def ego_state_for(config: SceneConfig, t_a: float, t_b: float) -> EgoState:
    return EgoState(compose(world_to_camera(config, t_b), camera_to_world(config, t_a)),
                    radar_velocity(config), t_a - t_b)


def world_boxes(config: SceneConfig, t: float) -> list[GtBox]:
    return [GtBox(b.center_at(t), b.half_extents, b.rotation, b.velocity,
                  bool(np.linalg.norm(b.velocity) > 0), i)
            for i, b in enumerate(config.bodies)]


def gt_box_velocity(boxes_t1, boxes_t2, t1: float, t2: float) -> dict:
    """Finite-difference box velocities keyed by ``body_id``."""
    if t2 == t1:
        raise ZeroDt("timestamps must differ")
    a = {b.body_id: b for b in boxes_t1}
    b = {b.body_id: b for b in boxes_t2}
    if a.keys() != b.keys() or len(a) != len(boxes_t1) or len(b) != len(boxes_t2):
        raise IdentityMismatch("box identities differ between the two frames")
    return {i: (b[i].center - a[i].center) / (t2 - t1) for i in a}


# -- rendering ----------------------------------------------------------------

@dataclass(frozen=True)
class RenderedView:
    """Per-pixel ray-cast results at one instant.

    ``body_depth[b]`` is the entry depth into body ``b`` (inf on a miss),
    ``ids`` the first hit (-1 ground, -2 nothing) and ``depth`` its depth.
    """

    t: float
    body_depth: np.ndarray
    ids: np.ndarray
    depth: np.ndarray


GROUND_ID = -1
SKY_ID = -2


def _rays(k: CameraIntrinsics) -> np.ndarray:
    xs = (np.arange(k.width, dtype=np.float64) - k.cx) / k.fx
    ys = (np.arange(k.height, dtype=np.float64) - k.cy) / k.fy
    U, V = np.meshgrid(xs, ys)
    return np.stack([U, V, np.ones_like(U)], axis=-1)


def render(config: SceneConfig, t: float) -> RenderedView:
    k = config.sensors.intrinsics
    T_wc = camera_to_world(config, t)
    T_cw = invert(T_wc)
    nb = len(config.bodies)
    if nb:
        rots = np.array([T_cw.rotation @ b.rotation for b in config.bodies])
        cens = np.array([T_cw.rotation @ b.center_at(t) + T_cw.translation for b in config.bodies])
        half = np.array([b.half_extents for b in config.bodies])
        body_depth = kernels.raycast_boxes(k.fx, k.fy, k.cx, k.cy, k.width, k.height, rots, cens, half)
    else:
        body_depth = np.full((0, k.height, k.width), np.inf)

    ground = np.full((k.height, k.width), np.inf)
    if config.ground_y is not None:
        dy = _rays(k) @ T_wc.rotation[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (config.ground_y - T_wc.translation[1]) / dy
        hit = (dy != 0) & (s > 0)
        ground[hit] = s[hit]

    depth = ground.copy()
    ids = np.where(np.isfinite(ground), GROUND_ID, SKY_ID).astype(np.int64)
    for b in range(nb):
        closer = body_depth[b] < depth
        depth[closer] = body_depth[b][closer]
        ids[closer] = b
    return RenderedView(t, body_depth, ids, depth)


def render_flow(config: SceneConfig, t_a: float, t_b: float, view: RenderedView | None = None) -> FlowField:
    """Exact flow moving each pixel of the image at ``t_a`` to its position at ``t_b``."""
    k = config.sensors.intrinsics
    if view is None:
        view = render(config, t_a)
    T_wa = camera_to_world(config, t_a)
    T_wb = camera_to_world(config, t_b)
    vel = np.array([b.velocity for b in config.bodies]).reshape(-1, 3)
    flow = kernels.synthesize_flow(k.fx, k.fy, k.cx, k.cy, k.width, k.height, view.ids, view.depth, vel,
                                   T_wa.rotation, T_wa.translation, T_wb.rotation, T_wb.translation,
                                   t_a - t_b)
    if T_wa == T_wb:
        # camera did not move: pixels on static geometry stay put exactly
        still = view.ids < 0
        if view.ids.max(initial=-1) >= 0:
            moving = np.linalg.norm(vel, axis=1) > 0
            still |= (view.ids >= 0) & ~moving[np.maximum(view.ids, 0)]
        flow[still] = 0.0
    return FlowField(flow)


# -- radar synthesis ----------------------------------------------------------

def _frame_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index), stream)))


def _sample_returns(config: SceneConfig, view: RenderedView, t: float, rng) -> list[RadarReturn]:
    k = config.sensors.intrinsics
    T_cw = world_to_camera(config, t)
    T_rc = invert(config.sensors.radar_extrinsics)
    R_rw = T_rc.rotation @ T_cw.rotation
    ego_r = T_rc.rotation @ radar_velocity(config)
    out = []
    for i, body in enumerate(config.bodies):
        n = body.surface_points
        if n == 0:
            continue
        bd = view.body_depth[i]
        inner = np.zeros(bd.shape, dtype=bool)
        inner[1:-1, 1:-1] = True
        visible = np.flatnonzero((inner & (view.ids == i)).ravel())
        hidden = np.flatnonzero((inner & np.isfinite(bd) & (view.ids >= 0) & (view.ids != i)
                                    & (view.depth < bd)).ravel())
        n_hidden = int(rng.binomial(n, config.see_through_prob)) if hidden.size else 0
        n_hidden = min(n_hidden, hidden.size)
        n_vis = min(n - n_hidden, visible.size)
        picks = [(p, False) for p in rng.choice(visible, n_vis, replace=False)] if n_vis else []
        if n_hidden:
            picks += [(p, True) for p in rng.choice(hidden, n_hidden, replace=False)]
        v_r = R_rw @ body.velocity
        for flat, occluded in picks:
            row, col = divmod(int(flat), k.width)
            s = bd[row, col]
            X_c = np.array([(col - k.cx) / k.fx * s, (row - k.cy) / k.fy * s, s])
            q = T_rc.rotation @ X_c + T_rc.translation
            r_hat = q / np.linalg.norm(q)
            if config.doppler_kind is DopplerKind.RAW:
                rdot = float(r_hat @ (v_r - ego_r))
            else:
                rdot = float(r_hat @ v_r)
            out.append(RadarReturn(q, rdot, config.doppler_kind, t, i, v_r, occluded))
    return out


def simulate_frame(config: SceneConfig, index: int, with_flow: bool | None = None) -> SceneFrame:
    """Noise-free frame ``index``; flow toward frame ``index - 1`` unless it is the first."""
    if with_flow is None:
        with_flow = index > 0
    return render_frame(config, config.time(index), config.time(index - 1) if with_flow else None, index)


def render_frame(config: SceneConfig, t: float, t_flow: float | None = None, index: int = 0) -> SceneFrame:
    """Noise-free capture at time ``t`` with flow toward the image at ``t_flow``.

    ``t_flow`` may lie before or after ``t``; ``index`` selects the sampling
    RNG stream and is stored on the frame.
    """
    view = render(config, t)
    returns = _sample_returns(config, view, t, _frame_rng(config.seed, index, _SAMPLE_STREAM))
    T_cw = world_to_camera(config, t)
    T_rw = compose(invert(config.sensors.radar_extrinsics), T_cw)
    boxes = [b.transformed(T_rw) for b in world_boxes(config, t)]
    flow = render_flow(config, t, t_flow, view) if t_flow is not None else None
    return SceneFrame(index, t, T_cw, config.sensors.radar_extrinsics, config.sensors.intrinsics,
                      radar_velocity(config), returns, boxes, flow)


def simulate(config: SceneConfig, noisy: bool = True) -> list[SceneFrame]:
    """All frames of the scene; noise from ``config.noise`` is applied last."""
    frames = [simulate_frame(config, i) for i in range(config.timing.frame_count)]
    if noisy and not config.noise.is_zero:
        frames = apply_noise(frames, config.noise, config.seed)
    return frames


def apply_noise(frames, spec: NoiseSpec, seed: int) -> list[SceneFrame]:
    """Perturb returns in range/azimuth/elevation and Doppler, flow additively.

    Azimuth is ``atan2(x, z)`` and elevation ``atan2(-y, hypot(x, z))`` in the
    radar frame. GT fields are left untouched. Streams are per frame.
    """
    if spec.is_zero:
        return list(frames)
    out = []
    for f in frames:
        rng = _frame_rng(seed, f.index, _NOISE_STREAM)
        n = len(f.returns)
        keep = rng.random(n) >= spec.dropout_prob if spec.dropout_prob > 0 else np.ones(n, bool)
        pos = f.positions()
        rdot = f.radial_speeds()
        if n and (spec.range_sigma or spec.azimuth_sigma or spec.elevation_sigma):
            x, y, z = pos.T
            rng_ = np.linalg.norm(pos, axis=1) + spec.range_sigma * rng.standard_normal(n)
            az = np.arctan2(x, z) + spec.azimuth_sigma * rng.standard_normal(n)
            el = np.arctan2(-y, np.hypot(x, z)) + spec.elevation_sigma * rng.standard_normal(n)
            rng_ = np.abs(rng_)
            pos = np.column_stack([rng_ * np.cos(el) * np.sin(az), -rng_ * np.sin(el),
                                   rng_ * np.cos(el) * np.cos(az)])
        if n and spec.doppler_sigma:
            rdot = rdot + spec.doppler_sigma * rng.standard_normal(n)
        returns = [dataclasses.replace(r, position=pos[i], radial_speed=rdot[i])
                   for i, r in enumerate(f.returns) if keep[i]]
        flow = f.flow
        if flow is not None and spec.flow_sigma:
            frng = _frame_rng(seed, f.index, _FLOW_STREAM)
            vec = flow.vectors + spec.flow_sigma * frng.standard_normal(flow.vectors.shape)
            flow = FlowField(vec, flow.valid)
        out.append(dataclasses.replace(f, returns=returns, flow=flow))
    return out


# -- randomized scenes ----------------------------------------------------------

def random_scene_config(seed: int, width: int = 160, height: int = 120, n_bodies: int | None = None,
                        points_per_body: int = 5, frame_count: int = 2, noise: NoiseSpec | None = None,
                        max_speed: float = 15.0, doppler_kind=DopplerKind.EGO_COMPENSATED,
                        see_through_prob: float = 0.0) -> SceneConfig:
    """A random but well-posed driving-like scene (deterministic in ``seed``)."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xC0FF,)))
    f = rng.uniform(0.8, 1.4) * width
    k = CameraIntrinsics(f, f * rng.uniform(0.98, 1.02),
                         width / 2 + rng.uniform(-3, 3), height / 2 + rng.uniform(-3, 3), width, height)
    ang = np.deg2rad(rng.uniform(-4, 4, size=3))
    from .frames import rot_x, rot_z
    radar = RigidTransform(rot_y(ang[0]) @ rot_x(ang[1]) @ rot_z(ang[2]),
                           [rng.uniform(-0.8, 0.8), rng.uniform(0.0, 1.0), rng.uniform(-1.5, 0.5)])
    cam_height = rng.uniform(1.2, 1.8)
    ego = EgoConfig(RigidTransform(rot_y(rng.uniform(-np.pi, np.pi)), [rng.uniform(-50, 50), 0.0,
                                                                      rng.uniform(-50, 50)]),
                    [rng.uniform(-0.5, 0.5), 0.0, rng.uniform(0.0, 15.0)], rng.uniform(-0.3, 0.3))
    T_wc = ego.initial_pose
    bodies = []
    nb = int(rng.integers(1, 4)) if n_bodies is None else n_bodies
    half_fov = np.arctan(0.45 * width / k.fx)
    for _ in range(nb):
        depth = rng.uniform(8.0, 40.0)
        lateral = np.tan(rng.uniform(-half_fov, half_fov)) * depth
        half = np.array([rng.uniform(0.7, 1.1), rng.uniform(0.6, 1.0), rng.uniform(1.5, 2.5)])
        c_cam = np.array([lateral, cam_height - half[1], depth])
        heading = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0.5, max_speed)
        v_cam = np.array([speed * np.sin(heading), rng.uniform(-0.3, 0.3), speed * np.cos(heading)])
        yaw_cam = heading + rng.uniform(-0.2, 0.2)
        yaw_world = yaw_cam + np.arctan2(T_wc.rotation[0, 2], T_wc.rotation[0, 0])
        bodies.append(BodyConfig(T_wc.rotation @ c_cam + T_wc.translation, half,
                                 T_wc.rotation @ v_cam, yaw_world, points_per_body))
    return SceneConfig(
        bodies=bodies,
        sensors=SensorConfig(k, radar),
        ego=ego,
        timing=TimingConfig(rng.uniform(0.05, 0.1), frame_count),
        noise=noise or NoiseSpec(),
        seed=int(seed),
        doppler_kind=doppler_kind,
        see_through_prob=see_through_prob,
        ground_y=T_wc.translation[1] + cam_height,
    )
