"""Radar-to-pixel association.

Ground-truth point/box matching, association labels from hypothetical
velocities, argmax selection with occlusion detection, and the training
tensor exporter for an external association network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllNeighborsInvalid, ValidationError
from .frames import CameraIntrinsics, RigidTransform, project_points, rot_y, transform_point
from .solver import DopplerKind, EgoState, FlowField, RadarReturn, SolveStatus, solve_batch

PERCENT_ERROR_FLOOR = 0.1  # m/s


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Sampled pixel offsets around a raw projection (y grows downward)."""

    left: int = 4
    right: int = 4
    top: int = 10
    bottom: int = 4
    stride: int = 2

    def __post_init__(self):
        if min(self.left, self.right, self.top, self.bottom) < 0 or self.stride < 1:
            raise ValidationError("neighborhood extents must be >= 0 and stride >= 1")

    @property
    def offsets(self) -> np.ndarray:
        """``(N, 2)`` integer ``(dx, dy)`` offsets, row-major from the top-left."""
        s = self.stride
        dxs = np.arange(-(self.left // s), self.right // s + 1) * s
        dys = np.arange(-(self.top // s), self.bottom // s + 1) * s
        dy, dx = np.meshgrid(dys, dxs, indexing="ij")
        return np.column_stack([dx.ravel(), dy.ravel()])

    @property
    def size(self) -> int:
        s = self.stride
        return ((self.left // s + self.right // s + 1)
                * (self.top // s + self.bottom // s + 1))

    def index_of(self, dx: int, dy: int) -> int:
        hits = np.flatnonzero((self.offsets == (dx, dy)).all(axis=1))
        if hits.size == 0:
            raise KeyError((dx, dy))
        return int(hits[0])


@dataclass(frozen=True)
class AssociationParams:
    t_d: float = 0.5
    t_p: float = 0.2
    c: float = 0.36
    t_a: float = 0.3

    def __post_init__(self):
        if not self.t_d > 0:
            raise ValidationError("t_d must be positive")
        if not 0 < self.t_p < 1:
            raise ValidationError("t_p must lie in (0, 1)")
        if not self.c > 0:
            raise ValidationError("c must be positive")
        if not 0 <= self.t_a <= 1:
            raise ValidationError("t_a must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class GtBox:
    """Oriented ground-truth box; ``rotation`` maps box axes into the box's frame."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray
    velocity: np.ndarray
    moving: bool
    body_id: int | None = None

    def __post_init__(self):
        for name, shape in (("center", (3,)), ("half_extents", (3,)), ("rotation", (3, 3)),
                            ("velocity", (3,))):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ValidationError(f"{name} must have shape {shape}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not np.all(self.half_extents > 0):
            raise ValidationError("box half extents must be positive")
        object.__setattr__(self, "moving", bool(self.moving))

    @classmethod
    def from_yaw(cls, center, half_extents, yaw: float, velocity, moving=None, body_id=None) -> GtBox:
        """Box rotated by ``yaw`` about the vertical (+y, camera-style) axis."""
        v = np.asarray(velocity, dtype=np.float64)
        if moving is None:
            moving = bool(np.linalg.norm(v) > 0)
        return cls(center, half_extents, rot_y(yaw), v, moving, body_id)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[0, 2], self.rotation[0, 0])

    def transformed(self, t: RigidTransform) -> GtBox:
        return GtBox(transform_point(t, self.center), self.half_extents,
                     t.rotation @ self.rotation, t.rotation @ self.velocity,
                     self.moving, self.body_id)

    def distance(self, points) -> np.ndarray:
        """0 inside the box, Euclidean distance to the surface outside."""
        p = np.asarray(points, dtype=np.float64)
        local = (p - self.center) @ self.rotation
        excess = np.maximum(np.abs(local) - self.half_extents, 0.0)
        return np.linalg.norm(excess, axis=-1)


@dataclass(frozen=True, eq=False)
class AssociationScoreMap:
    """Scores of the ``N`` neighbours of one return's raw projection."""

    frame: int
    point_index: int
    raw_projection: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        px = np.array(self.raw_projection, dtype=np.float64)
        sc = np.array(self.scores, dtype=np.float64)
        if px.shape != (2,) or sc.ndim != 1:
            raise ValidationError("score map needs a 2D raw projection and a 1D score vector")
        if np.any(~(sc >= 0) | ~(sc <= 1)):
            raise ValidationError("association scores must lie in [0, 1]")
        px.setflags(write=False)
        sc.setflags(write=False)
        object.__setattr__(self, "raw_projection", px)
        object.__setattr__(self, "scores", sc)

    def __eq__(self, other):
        if not isinstance(other, AssociationScoreMap):
            return NotImplemented
        return (self.frame == other.frame and self.point_index == other.point_index
                and np.array_equal(self.raw_projection, other.raw_projection)
                and np.array_equal(self.scores, other.scores))

    __hash__ = None


def match_points_to_boxes(points: list[RadarReturn], boxes: list[GtBox],
                          params: AssociationParams = AssociationParams(),
                          radar_velocity=None) -> list[int | None]:
    """Index of the GT box each return belongs to, or ``None``.

    A return matches a box when it lies within ``t_d`` of it and its radial
    speed agrees with the box velocity's radial component to within ``t_p``
    (relative, with a 0.1 m/s floor on the denominator). The nearest
    qualifying box wins. Raw Doppler needs ``radar_velocity`` (radar frame).
    """
    if not points or not boxes:
        return [None] * len(points)
    pos = np.array([p.position for p in points])
    r_hat = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    rdot = np.array([p.radial_speed for p in points])
    raw = np.array([p.doppler_kind is DopplerKind.RAW for p in points])
    if raw.any():
        if radar_velocity is None:
            raise ValidationError("raw Doppler returns need the radar velocity to match boxes")
        rdot = rdot + np.where(raw, r_hat @ np.asarray(radar_velocity, dtype=np.float64), 0.0)

    dist = np.stack([b.distance(pos) for b in boxes], axis=1)
    box_vr = r_hat @ np.stack([b.velocity for b in boxes], axis=1)
    perr = np.abs(rdot[:, None] - box_vr) / np.maximum(np.abs(box_vr), PERCENT_ERROR_FLOOR)
    ok = (dist <= params.t_d) & (perr <= params.t_p)
    masked = np.where(ok, dist, np.inf)
    best = np.argmin(masked, axis=1)
    return [int(b) if ok[i, b] else None for i, b in enumerate(best)]


@dataclass(frozen=True)
class Hypotheses:
    """Hypothetical velocities (camera frame A) for every neighbour of one return."""

    raw_projection: np.ndarray
    pixels: np.ndarray
    velocity: np.ndarray
    status: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.status == SolveStatus.OK


def hypothetical_velocities(r: RadarReturn, flow: FlowField, k: CameraIntrinsics, ego: EgoState,
                            extrinsics: RigidTransform, spec: NeighborhoodSpec = NeighborhoodSpec(),
                            raw_projection=None) -> Hypotheses:
    """Solve the full velocity as if the return sat at each neighbour pixel.

    ``raw_projection`` overrides the projected pixel the neighbourhood is
    centred on (default: project the return).
    """
    return _hypotheses_batch([r], flow, k, ego, extrinsics, spec,
                             None if raw_projection is None else np.asarray(raw_projection)[None],
                             strict=True)[0]


def _hypotheses_batch(points, flow, k, ego, extrinsics, spec, raw_projections=None, strict=False):
    n = len(points)
    if n == 0:
        return []
    pos = np.array([p.position for p in points])
    if raw_projections is None:
        raw_projections, _ = project_points(k, transform_point(extrinsics, pos))
    raw_projections = np.asarray(raw_projections, dtype=np.float64).reshape(n, 2)
    off = spec.offsets
    nn = off.shape[0]
    pixels = raw_projections[:, None, :] + off[None, :, :]
    sol = solve_batch(np.repeat(pos, nn, axis=0),
                      np.repeat([p.radial_speed for p in points], nn),
                      np.repeat([p.doppler_kind is DopplerKind.RAW for p in points], nn),
                      flow, k, ego, extrinsics, pixels.reshape(-1, 2))
    vel = sol.velocity.reshape(n, nn, 3)
    status = sol.status.reshape(n, nn)
    out = []
    for i in range(n):
        if strict and not np.any(status[i] == SolveStatus.OK):
            raise AllNeighborsInvalid(f"no neighbour of pixel {raw_projections[i].tolist()} yields a solve")
        out.append(Hypotheses(raw_projections[i], pixels[i], vel[i], status[i]))
    return out


def velocity_error(est, gt) -> float:
    return float(np.linalg.norm(np.asarray(est, dtype=np.float64) - np.asarray(gt, dtype=np.float64)))


def association_label(e_m, c: float):
    """``exp(-e_m**2 / c)``; works elementwise on arrays."""
    return np.exp(-np.square(e_m) / c)


def generate_labels(points: list[RadarReturn], flow: FlowField, k: CameraIntrinsics, ego: EgoState,
                    extrinsics: RigidTransform, boxes: list[GtBox],
                    params: AssociationParams = AssociationParams(),
                    spec: NeighborhoodSpec = NeighborhoodSpec(), frame: int = 0,
                    raw_projections=None) -> list[AssociationScoreMap]:
    """Label maps for every return matched to a moving GT box.

    Boxes are in the radar frame. Each neighbour's hypothetical velocity is
    compared with the box velocity; failed neighbours score 0.
    """
    radar_vel = extrinsics.rotation.T @ ego.ego_velocity
    matches = match_points_to_boxes(points, boxes, params, radar_velocity=radar_vel)
    chosen = [i for i, m in enumerate(matches) if m is not None and boxes[m].moving]
    if not chosen:
        return []
    raw = None if raw_projections is None else np.asarray(raw_projections, dtype=np.float64)[chosen]
    hyps = _hypotheses_batch([points[i] for i in chosen], flow, k, ego, extrinsics, spec, raw)
    out = []
    for i, h in zip(chosen, hyps):
        gt_A = extrinsics.rotation @ boxes[matches[i]].velocity
        err = np.linalg.norm(h.velocity - gt_A, axis=1)
        labels = np.where(h.valid, association_label(err, params.c), 0.0)
        out.append(AssociationScoreMap(frame, i, h.raw_projection, labels))
    return out


def select_association(scores: AssociationScoreMap, t_a: float,
                       spec: NeighborhoodSpec = NeighborhoodSpec()) -> np.ndarray | None:
    """Pixel of the best-scoring neighbour, or ``None`` when the return is occluded.

    Ties go to the lowest neighbour index.
    """
    s = scores.scores
    if s.shape[0] != spec.size:
        raise ValidationError(f"score map has {s.shape[0]} entries, neighbourhood has {spec.size}")
    k_max = int(np.argmax(s))
    if not s[k_max] >= t_a:
        return None
    return scores.raw_projection + spec.offsets[k_max]


INPUT_CHANNELS = ("image_r", "image_g", "image_b", "radar_depth", "flow_x", "flow_y",
                  "reserved_0", "reserved_1")


def training_tensors(points: list[RadarReturn], flow: FlowField | None, k: CameraIntrinsics,
                     extrinsics: RigidTransform, labels: list[AssociationScoreMap],
                     spec: NeighborhoodSpec = NeighborhoodSpec(), image=None):
    """Build the ``(8, H, W)`` input raster and the ``(N, H, W)`` label raster.

    Channels follow :data:`INPUT_CHANNELS`; without an image the RGB channels
    are zero and the two reserved channels are always zero. Depth and labels
    sit at the rounded raw projection; when two returns share a pixel the
    nearer one wins.
    """
    h, w = k.height, k.width
    x = np.zeros((8, h, w), dtype=np.float32)
    if image is not None:
        x[0:3] = np.moveaxis(np.asarray(image, dtype=np.float32), -1, 0)
    if flow is not None:
        x[4] = np.nan_to_num(flow.vectors[..., 0], nan=0.0)
        x[5] = np.nan_to_num(flow.vectors[..., 1], nan=0.0)
    y = np.zeros((spec.size, h, w), dtype=np.float32)
    if not points:
        return x, y

    q_A = transform_point(extrinsics, np.array([p.position for p in points]))
    px, depth = project_points(k, q_A)
    cells = np.rint(px)
    owner = {}
    for i in np.argsort(-depth, kind="stable"):
        if not depth[i] > 0:
            continue
        cx, cy = cells[i]
        if 0 <= cx < w and 0 <= cy < h:
            x[3, int(cy), int(cx)] = depth[i]
            owner[(int(cx), int(cy))] = int(i)
    by_point = {m.point_index: m for m in labels}
    for (cx, cy), i in owner.items():
        if i in by_point:
            y[:, cy, cx] = by_point[i].scores
    return x, y


def export_training_sample(path_stem, points, flow, k, extrinsics, labels,
                           spec: NeighborhoodSpec = NeighborhoodSpec(), image=None) -> tuple[Path, Path]:
    """Write ``<stem>_input.npy`` and ``<stem>_labels.npy``."""
    from .io import write_tensor

    x, y = training_tensors(points, flow, k, extrinsics, labels, spec, image)
    stem = Path(path_stem)
    xp = stem.with_name(stem.name + "_input.npy")
    yp = stem.with_name(stem.name + "_labels.npy")
    write_tensor(xp, x)
    write_tensor(yp, y)
    return xp, yp


def load_predicted_associations(path) -> list[AssociationScoreMap]:
    from .io import read_score_maps

    return read_score_maps(path)
