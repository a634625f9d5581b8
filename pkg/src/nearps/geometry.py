"""Perspective camera, per-pixel depth/normal containers and depth differentiation.

Conventions: camera at the origin, x right, y down, z forward. Depth is the
z coordinate of the surface point (not the ray length). Surface normals are
oriented towards the camera, i.e. ``n_z <= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


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
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def f_norm(self):
        """Focal length normalised by half the sensor width (1 ~ fish-eye, 10 ~ orthographic)."""
        return self.fx / (self.width / 2.0)

    def pixel_grid(self):
        """Return ``(u, v)`` pixel coordinate arrays of shape (height, width)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return u, v

    def rays(self, u=None, v=None):
        """Un-normalised ray directions ``[(u-cx)/fx, (v-cy)/fy, 1]``.

        Defaults to the full pixel grid, giving an array of shape (H, W, 3).
        """
        if u is None:
            u, v = self.pixel_grid()
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        x = (u - self.cx) / self.fx
        y = (v - self.cy) / self.fy
        return np.stack(np.broadcast_arrays(x, y, np.ones_like(x + y)), axis=-1)

    def project(self, X):
        """Project camera-frame points to pixel coordinates ``(u, v)``."""
        X = np.asarray(X, dtype=np.float64)
        z = X[..., 2]
        return self.fx * X[..., 0] / z + self.cx, self.fy * X[..., 1] / z + self.cy


def _validate_mask(values, mask, trailing):
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = np.ones(values.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if values.ndim != 2 + trailing or values.shape[:2] != mask.shape:
        raise ValueError(f"values {values.shape} and mask {mask.shape} do not match")
    return values, mask


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth in meters with a validity mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values, mask = _validate_mask(self.values, self.mask, 0)
        inside = values[mask]
        if not np.all(np.isfinite(inside)) or np.any(inside <= 0):
            raise DomainError("masked-in depth values must be finite and positive")
        values = np.where(mask, values, 0.0)
        values.flags.writeable = False
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Per-pixel unit normals in the camera frame with a validity mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values, mask = _validate_mask(self.values, self.mask, 1)
        inside = values[mask]
        if inside.size:
            if np.any(np.abs(np.linalg.norm(inside, axis=-1) - 1.0) > 1e-6):
                raise DomainError("masked-in normals must have unit norm")
            if np.any(inside[:, 2] > 1e-12):
                raise DomainError("normals must face the camera (n_z <= 0)")
        values = np.where(mask[..., None], values, 0.0)
        values.flags.writeable = False
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.mask.shape


def back_project(cam, u, v, z):
    """Back-project pixel coordinates at depth ``z`` to camera-frame points.

    Inputs broadcast; the result has a trailing axis of length 3.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise DomainError("depth must be positive for back-projection")
    return cam.rays(u, v) * z[..., None]


def viewing_vector(cam, u, v, z=None):
    """Unit vector from the surface point towards the camera, ``-X/|X|``.

    Only the ray direction matters, so ``z`` is optional; when given it is
    validated like in :func:`back_project`.
    """
    if z is not None:
        back_project(cam, u, v, z)
    r = cam.rays(u, v)
    return -r / np.linalg.norm(r, axis=-1, keepdims=True)


def orient_towards_camera(n):
    """Flip normals with positive z-component so that ``n_z <= 0``."""
    n = np.asarray(n, dtype=np.float64)
    return np.where(n[..., 2:3] > 0, -n, n)


def _axis_derivative(X, mask, axis):
    """Central differences along ``axis`` with one-sided fallbacks at mask edges."""
    fwd = np.zeros_like(X)
    bwd = np.zeros_like(X)
    has_fwd = np.zeros(mask.shape, dtype=bool)
    has_bwd = np.zeros(mask.shape, dtype=bool)
    lo = [slice(None)] * 2
    hi = [slice(None)] * 2
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    lo, hi = tuple(lo), tuple(hi)
    pair = mask[lo] & mask[hi]
    diff = X[hi] - X[lo]
    fwd[lo] = diff
    has_fwd[lo] = pair
    bwd[hi] = diff
    has_bwd[hi] = pair
    both = has_fwd & has_bwd
    d = np.where(both[..., None], 0.5 * (fwd + bwd), np.where(has_fwd[..., None], fwd, bwd))
    return d, has_fwd | has_bwd


def normals_from_depth(cam, depth):
    """Normals by numerical differentiation of the back-projected surface.

    Tangents ``dX/du`` and ``dX/dv`` use central differences inside the mask
    and one-sided differences at its border. Pixels lacking a valid neighbour
    along either axis, or with degenerate tangents, are masked out.
    """
    mask = depth.mask
    if not mask.any():
        raise DomainError("depth mask is empty")
    z = np.where(mask, depth.values, 1.0)
    X = cam.rays() * z[..., None]
    Xu, ok_u = _axis_derivative(X, mask, axis=1)
    Xv, ok_v = _axis_derivative(X, mask, axis=0)
    n = np.cross(Xu, Xv)
    norm = np.linalg.norm(n, axis=-1)
    out_mask = mask & ok_u & ok_v & (norm > 1e-12)
    n = n / np.where(out_mask, norm, 1.0)[..., None]
    n = orient_towards_camera(n)
    return NormalMap(np.where(out_mask[..., None], n, 0.0), out_mask)


def flat_plane_init(cam, mask, mean_distance):
    """Fronto-parallel plane at ``mean_distance`` over ``mask``."""
    if not mean_distance > 0:
        raise DomainError("mean_distance must be positive")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != cam.shape:
        raise ValueError(f"mask shape {mask.shape} does not match camera {cam.shape}")
    return DepthMap(np.where(mask, float(mean_distance), 0.0), mask)


def angular_error_deg(a, b):
    """Angle in degrees between corresponding vectors of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(cross, dot))
