"""Velocity error metrics: radial/tangential decomposition, per-object averages
and depth x alpha binned statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError, ZeroVelocity

COMPONENTS = ("full", "radial", "tangential")
UNIT_TOL = 1e-9
MIN_SPEED = 1e-6  # m/s
DEFAULT_DEPTH_EDGES = (0.0, 25.0, 50.0, math.inf)
DEFAULT_ALPHA_EDGES = (0.0, 30.0, 60.0, 90.0)


@dataclass(frozen=True)
class ErrorStats:
    """Population mean and standard deviation; ``count == 0`` marks no data (NaN stats)."""

    mean: float
    std: float
    count: int

    @classmethod
    def empty(cls) -> ErrorStats:
        return cls(math.nan, math.nan, 0)

    @classmethod
    def from_values(cls, values) -> ErrorStats:
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return cls.empty()
        # sorting makes the sums independent of sample order
        v = np.sort(v)
        mean = float(np.mean(v))
        return cls(mean, float(np.sqrt(np.mean(np.square(v - mean)))), int(v.size))

    @property
    def is_empty(self) -> bool:
        return self.count == 0


def _check_unit(r_hat):
    n = np.linalg.norm(r_hat, axis=-1)
    if np.any(~(np.abs(n - 1.0) <= UNIT_TOL)):
        raise ValidationError("r_hat must have unit norm")


def error_components(est, gt, r_hat) -> dict[str, np.ndarray]:
    """Vectorized :func:`decompose_error` over ``(N, 3)`` stacks."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    _check_unit(r_hat)
    e = est - gt
    radial = np.sum(e * r_hat, axis=-1)
    tang = e - radial[..., None] * r_hat
    return {"full": np.linalg.norm(e, axis=-1), "radial": np.abs(radial),
            "tangential": np.linalg.norm(tang, axis=-1)}


def decompose_error(est, gt, r_hat) -> dict[str, float]:
    """Full, radial and tangential magnitude of ``est - gt`` relative to ``r_hat``."""
    return {k: float(v) for k, v in error_components(est, gt, r_hat).items()}


def alpha_angles(velocity, r_hat) -> np.ndarray:
    """Folded angle in degrees between each velocity and its radial direction."""
    v = np.asarray(velocity, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    _check_unit(r_hat)
    speed = np.linalg.norm(v, axis=-1)
    if np.any(~(speed > MIN_SPEED)):
        raise ZeroVelocity("alpha is undefined for a (near) zero velocity")
    c = np.abs(np.sum(v * r_hat, axis=-1)) / speed
    return np.degrees(np.arccos(np.clip(c, 0.0, 1.0)))


def alpha_angle(velocity, r_hat) -> float:
    return float(alpha_angles(np.asarray(velocity)[None], np.asarray(r_hat)[None])[0])


@dataclass(frozen=True, eq=False)
class PointSamples:
    """Estimates of one method with the matching GT, radial direction and depth."""

    est: np.ndarray
    gt: np.ndarray
    r_hat: np.ndarray
    depth: np.ndarray | None = None

    def __post_init__(self):
        for name in ("est", "gt", "r_hat"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 3))
        n = self.est.shape[0]
        if self.gt.shape[0] != n or self.r_hat.shape[0] != n:
            raise ValidationError("est, gt and r_hat must have the same length")
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64).reshape(-1)
            if d.shape[0] != n:
                raise ValidationError("depth must align with the samples")
            object.__setattr__(self, "depth", d)

    def __len__(self):
        return self.est.shape[0]


def radial_baseline(radial_speed, r_hat) -> np.ndarray:
    """The radial-only estimate ``r_dot * r_hat``."""
    return np.asarray(radial_speed, dtype=np.float64)[..., None] * np.asarray(r_hat, dtype=np.float64)


def point_error_stats(samples) -> dict:
    """ErrorStats per component; a mapping of methods gives one dict per method."""
    if isinstance(samples, PointSamples):
        if len(samples) == 0:
            return {c: ErrorStats.empty() for c in COMPONENTS}
        comps = error_components(samples.est, samples.gt, samples.r_hat)
        return {c: ErrorStats.from_values(comps[c]) for c in COMPONENTS}
    return {name: point_error_stats(s) for name, s in samples.items()}


def object_velocity(point_velocities, assignment) -> dict:
    """Mean member velocity per box id; points assigned ``None`` are ignored."""
    v = np.asarray(point_velocities, dtype=np.float64).reshape(-1, 3)
    if len(assignment) != v.shape[0]:
        raise ValidationError("assignment must align with point velocities")
    out = {}
    for box in dict.fromkeys(a for a in assignment if a is not None):
        sel = np.array([a == box for a in assignment])
        out[box] = np.mean(v[sel], axis=0)
    return out


def _edges(e, name):
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
        raise ValidationError(f"{name} edges must be strictly increasing with at least two entries")
    return e


def _bin(values, edges, name):
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = edges.size - 2  # last bin is closed
    if np.any((idx < 0) | (idx > edges.size - 2)) or np.any(np.isnan(values)):
        raise ValidationError(f"{name} value outside [{edges[0]}, {edges[-1]}]")
    return idx


@dataclass(frozen=True, eq=False)
class BinnedErrorGrid:
    """ErrorStats per (depth bin, alpha bin); bins are half-open except the last alpha bin."""

    depth_edges: np.ndarray
    alpha_edges: np.ndarray
    cells: tuple = field(repr=False)

    def cell(self, i: int, j: int) -> ErrorStats:
        return self.cells[i][j]

    @property
    def counts(self) -> np.ndarray:
        return np.array([[c.count for c in row] for row in self.cells])

    @property
    def means(self) -> np.ndarray:
        return np.array([[c.mean for c in row] for row in self.cells])


def binned_grid(values, depth, alpha, depth_edges=DEFAULT_DEPTH_EDGES,
                alpha_edges=DEFAULT_ALPHA_EDGES) -> BinnedErrorGrid:
    de = _edges(depth_edges, "depth")
    ae = _edges(alpha_edges, "alpha")
    values = np.asarray(values, dtype=np.float64).ravel()
    di = _bin(np.asarray(depth, dtype=np.float64).ravel(), de, "depth")
    ai = _bin(np.asarray(alpha, dtype=np.float64).ravel(), ae, "alpha")
    cells = tuple(tuple(ErrorStats.from_values(values[(di == i) & (ai == j)]) for j in range(ae.size - 1))
                  for i in range(de.size - 1))
    return BinnedErrorGrid(de, ae, cells)


def binned_heatmap(samples, depth_edges=DEFAULT_DEPTH_EDGES, alpha_edges=DEFAULT_ALPHA_EDGES) -> dict:
    """Grid per component (per method for a mapping).

    alpha is measured between the GT velocity and ``r_hat``; samples whose GT
    speed is at most 1e-6 m/s have no alpha and are left out.
    """
    if not isinstance(samples, PointSamples):
        return {name: binned_heatmap(s, depth_edges, alpha_edges) for name, s in samples.items()}
    if samples.depth is None:
        raise ValidationError("binned heatmap needs per-sample depth")
    moving = np.linalg.norm(samples.gt, axis=1) > MIN_SPEED
    comps = error_components(samples.est[moving], samples.gt[moving], samples.r_hat[moving])
    alpha = alpha_angles(samples.gt[moving], samples.r_hat[moving]) if moving.any() else np.zeros(0)
    depth = samples.depth[moving]
    return {c: binned_grid(comps[c], depth, alpha, depth_edges, alpha_edges) for c in COMPONENTS}

