"""Frame-level orchestration shared by the CLI and the acceptance checks.

Association modes
    ``raw``     the return's own projection.
    ``oracle``  the raw projection, except returns flagged ``gt_occluded``
                are reported as Occluded.
    ``file``    association score maps (e.g. from an external network) picked
                with :func:`~fullvel.assoc.select_association`; returns without
                a map keep their raw projection.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .assoc import AssociationParams, NeighborhoodSpec, generate_labels, select_association
from .errors import ValidationError
from .frames import project_points, transform_point
from .metrics import PointSamples, radial_baseline
from .sim import SceneFrame, ego_state_between
from .solver import SolveStatus, solve_batch

ASSOC_MODES = ("raw", "oracle", "file")


@dataclass(frozen=True, eq=False)
class FrameSolve:
    """Per-return solve results of one frame; velocities are in camera frame A."""

    frame: int
    velocity: np.ndarray
    condition: np.ndarray
    previous_depth: np.ndarray
    status: np.ndarray
    assoc_mode: str

    def __len__(self):
        return self.status.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return self.status == SolveStatus.OK

    def radar_velocity(self, radar_extrinsics) -> np.ndarray:
        """Velocities rotated into the radar frame (NaN rows stay NaN)."""
        return self.velocity @ radar_extrinsics.rotation


def _failed(frame: SceneFrame, status: SolveStatus, mode: str) -> FrameSolve:
    n = len(frame.returns)
    return FrameSolve(frame.index, np.full((n, 3), np.nan), np.full(n, np.nan), np.full(n, np.nan),
                      np.full(n, status, dtype=np.int8), mode)


def raw_projections(frame: SceneFrame) -> np.ndarray:
    px, _ = project_points(frame.intrinsics, transform_point(frame.radar_extrinsics, frame.positions()))
    return px


def solve_frame(frames, index: int, assoc: str = "raw", score_maps=None,
                t_a: float = AssociationParams.t_a, spec: NeighborhoodSpec = NeighborhoodSpec()) -> FrameSolve:
    """Solve every return of ``frames[index]`` against the previous frame."""
    if assoc not in ASSOC_MODES:
        raise ValidationError(f"unknown association mode {assoc!r}")
    f = frames[index]
    n = len(f.returns)
    if index == 0 or f.flow is None:
        return _failed(f, SolveStatus.NO_FLOW, assoc)
    if n == 0:
        return _failed(f, SolveStatus.OK, assoc)
    ego = ego_state_between(f, frames[index - 1])
    occluded = np.zeros(n, dtype=bool)
    pixels = None
    if assoc == "oracle":
        occluded = np.array([r.gt_occluded for r in f.returns])
    elif assoc == "file":
        pixels = raw_projections(f)
        maps = score_maps or {}
        for j in range(n):
            m = maps.get((f.index, j))
            if m is None:
                continue
            sel = select_association(m, t_a, spec)
            if sel is None:
                occluded[j] = True
            else:
                pixels[j] = sel
    sol = solve_batch(f.positions(), f.radial_speeds(), f.raw_mask(), f.flow, f.intrinsics, ego,
                      f.radar_extrinsics, pixels)
    vel = sol.velocity.copy()
    d_p = sol.previous_depth.copy()
    status = sol.status.copy()
    status[occluded] = SolveStatus.OCCLUDED
    vel[occluded] = np.nan
    d_p[occluded] = np.nan
    return FrameSolve(f.index, vel, sol.condition_number, d_p, status, assoc)


def _pool_map(fn, items, workers: int | None):
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def solve_frames(frames, assoc: str = "raw", score_maps=None, t_a: float = AssociationParams.t_a,
                 spec: NeighborhoodSpec = NeighborhoodSpec(), workers: int | None = None,
                 indices=None) -> list[FrameSolve]:
    """:func:`solve_frame` for each frame (or ``indices``), in order."""
    idx = range(len(frames)) if indices is None else indices
    return _pool_map(lambda i: solve_frame(frames, i, assoc, score_maps, t_a, spec), idx, workers)


def solve_rows(solves) -> list[tuple]:
    """Rows of the solve CSV, ordered by (frame, point)."""
    rows = []
    for s in solves:
        for j in range(len(s)):
            v = s.velocity[j]
            rows.append((s.frame, j, v[0], v[1], v[2], float(s.condition[j]), float(s.previous_depth[j]),
                         SolveStatus(int(s.status[j])).label, s.assoc_mode))
    return rows


def frame_labels(frames, params: AssociationParams = AssociationParams(),
                 spec: NeighborhoodSpec = NeighborhoodSpec(), workers: int | None = None) -> list:
    """Association label maps for every frame that has flow, in (frame, point) order."""
    def one(i):
        f = frames[i]
        if i == 0 or f.flow is None or not f.returns:
            return []
        ego = ego_state_between(f, frames[i - 1])
        return generate_labels(list(f.returns), f.flow, f.intrinsics, ego, f.radar_extrinsics,
                               list(f.boxes), params, spec, frame=f.index)

    out = []
    for maps in _pool_map(one, range(len(frames)), workers):
        out.extend(maps)
    return out


def eval_geometry(frame: SceneFrame):
    """Camera-frame radial directions, depths and ego-compensated radial speeds."""
    q_A = transform_point(frame.radar_extrinsics, frame.positions())
    ray = q_A - frame.radar_extrinsics.translation
    r_hat = ray / np.linalg.norm(ray, axis=1, keepdims=True)
    rdot = frame.radial_speeds()
    raw = frame.raw_mask()
    rdot = rdot + np.where(raw, r_hat @ frame.radar_velocity, 0.0)
    return r_hat, q_A[:, 2], rdot


def gt_velocities(frame: SceneFrame) -> np.ndarray:
    """GT velocities in the camera frame (NaN where unknown)."""
    out = np.full((len(frame.returns), 3), np.nan)
    for j, r in enumerate(frame.returns):
        if r.gt_velocity is not None:
            out[j] = frame.radar_extrinsics.rotation @ r.gt_velocity
    return out


def collect_samples(frames, estimates: dict) -> dict[str, PointSamples]:
    """Evaluation samples per method plus the radial baseline.

    ``estimates[method]`` maps frame index to an ``(n, 3)`` camera-frame
    velocity array (NaN for failures). A return enters the samples when it
    has GT and every method produced a finite estimate, so all methods are
    compared on the same points.
    """
    by_index = {f.index: f for f in frames}
    names = list(estimates)
    common = set.intersection(*(set(estimates[m]) for m in names)) if names else set()
    parts = {m: [] for m in names + ["baseline"]}
    gts, rhs, deps = [], [], []
    for fi in sorted(common):
        f = by_index[fi]
        if not f.returns:
            continue
        r_hat, depth, rdot = eval_geometry(f)
        gt = gt_velocities(f)
        keep = np.all(np.isfinite(gt), axis=1)
        for m in names:
            keep &= np.all(np.isfinite(estimates[m][fi]), axis=1)
        for m in names:
            parts[m].append(estimates[m][fi][keep])
        parts["baseline"].append(radial_baseline(rdot[keep], r_hat[keep]))
        gts.append(gt[keep])
        rhs.append(r_hat[keep])
        deps.append(depth[keep])
    if not gts:
        empty = PointSamples(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
        return {m: empty for m in parts}
    gt, rh, dep = np.concatenate(gts), np.concatenate(rhs), np.concatenate(deps)
    return {m: PointSamples(np.concatenate(v), gt, rh, dep) for m, v in parts.items()}
