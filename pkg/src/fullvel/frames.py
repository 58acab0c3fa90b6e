"""Rigid transforms, pinhole projection and normalized image coordinates.

Conventions
-----------
* Points are plain ``(3,)`` float arrays (or ``(N, 3)`` stacks); the
  homogeneous ``w = 1`` is implicit.
* ``T_ab`` maps coordinates expressed in frame ``b`` into frame ``a``:
  ``p_a = R_ab @ p_b + t_ab``.
* Camera frame: +z forward, +x right, +y down. A point ``(u*d, v*d, d)``
  projects to normalized coordinates ``(u, v)`` at depth ``d``.
* Pixel coordinates are continuous; integer values are pixel centres and
  ``flow[y, x]`` holds the value at pixel ``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, ValidationError

ORTHONORMAL_TOL = 1e-9


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An SE(3) element stored as a rotation matrix plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValidationError("transform has non-finite entries")
        G = R.T @ R
        G[0, 0] -= 1.0
        G[1, 1] -= 1.0
        G[2, 2] -= 1.0
        if np.abs(G).max() > ORTHONORMAL_TOL:
            raise ValidationError("rotation is not orthonormal")
        if abs(float(np.dot(R[0], np.cross(R[1], R[2]))) - 1.0) > ORTHONORMAL_TOL:
            raise ValidationError("rotation is not proper (det != +1)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return transform_point(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    __hash__ = None

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                    and np.allclose(self.translation, other.translation, rtol=0, atol=atol))


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(R) -> np.ndarray:
    """Nearest proper rotation to ``R`` (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1
    return U @ Vt


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """Transform that applies ``t2`` first, then ``t1``."""
    return RigidTransform(t1.rotation @ t2.rotation,
                          t1.rotation @ t2.translation + t1.translation)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def transform_point(t: RigidTransform, p) -> np.ndarray:
    """``R @ p + t`` for a single ``(3,)`` point or an ``(N, 3)`` stack."""
    p = np.asarray(p, dtype=np.float64)
    return p @ t.rotation.T + t.translation


def rotate_vector(t: RigidTransform, v) -> np.ndarray:
    """Apply only the rotation block, as needed for velocities."""
    v = np.asarray(v, dtype=np.float64)
    return v @ t.rotation.T


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")


def normalize_pixel(k: CameraIntrinsics, px) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    return np.stack([(px[..., 0] - k.cx) / k.fx, (px[..., 1] - k.cy) / k.fy], axis=-1)


def denormalize_pixel(k: CameraIntrinsics, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([uv[..., 0] * k.fx + k.cx, uv[..., 1] * k.fy + k.cy], axis=-1)


def project(k: CameraIntrinsics, p) -> tuple[np.ndarray, float]:
    """Project a camera-frame point to ``(pixel, depth)``."""
    p = np.asarray(p, dtype=np.float64)
    if not p[2] > 0:
        raise NonPositiveDepth(f"point {p.tolist()} is not in front of the camera")
    return denormalize_pixel(k, p[:2] / p[2]), float(p[2])


def project_points(k: CameraIntrinsics, pts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project`; rows with depth <= 0 get NaN pixels."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pts[:, :2] / z[:, None]
    uv[~(z > 0)] = np.nan
    return denormalize_pixel(k, uv), z.copy()


def back_project(uv, depth) -> np.ndarray:
    """Camera-frame point ``(u*d, v*d, d)``; broadcasts over leading axes."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(depth > 0):
        raise NonPositiveDepth("back-projection depth must be positive")
    return np.concatenate([uv * depth[..., None], depth[..., None]], axis=-1)
