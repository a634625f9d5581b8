"""Point-light model: lighting vectors, radial + angular attenuation, compensation.

Attenuation of light ``m`` at surface point ``X`` is::

    a_m(X) = phi_m * (s . D_m)^mu_m / |P_m - X|^2,   s = (X - P_m) / |X - P_m|

where ``s`` points from the light to the surface, so a LED facing the scene
along its principal direction ``D_m`` has anisotropy cosine 1 on-axis.
Points behind the emitter (``s . D_m < 0``) receive no light.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import back_project


def _vec3(x, name):
    x = np.array(x, dtype=np.float64)
    if x.shape == ():
        x = np.full(3, float(x))
    if x.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {x.shape}")
    x.flags.writeable = False
    return x


@dataclass(frozen=True, eq=False)
class PointLight:
    position: np.ndarray
    brightness: np.ndarray
    direction: np.ndarray
    mu: float

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position, "position"))
        object.__setattr__(self, "brightness", _vec3(self.brightness, "brightness"))
        object.__setattr__(self, "direction", _vec3(self.direction, "direction"))
        object.__setattr__(self, "mu", float(self.mu))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("principal direction must be a unit vector")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if np.any(self.brightness <= 0):
            raise ValueError("brightness components must be positive")


@dataclass(frozen=True, eq=False)
class LightSet:
    """Array-of-lights view: positions (M,3), brightness (M,3), directions (M,3), mu (M,)."""

    positions: np.ndarray
    brightness: np.ndarray
    directions: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        m = len(pos)
        phi = np.array(self.brightness, dtype=np.float64)
        if phi.ndim == 1 and phi.shape[0] == m:
            phi = np.repeat(phi[:, None], 3, axis=1)
        phi = phi.reshape(m, 3)
        d = np.array(self.directions, dtype=np.float64).reshape(m, 3)
        mu = np.broadcast_to(np.array(self.mu, dtype=np.float64), (m,)).copy()
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-6):
            raise ValueError("principal directions must be unit vectors")
        if np.any(mu < 0):
            raise ValueError("mu must be non-negative")
        if np.any(phi <= 0):
            raise ValueError("brightness components must be positive")
        for name, arr in (("positions", pos), ("brightness", phi), ("directions", d), ("mu", mu)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_lights(cls, lights):
        lights = list(lights)
        return cls(
            [l.position for l in lights],
            [l.brightness for l in lights],
            [l.direction for l in lights],
            [l.mu for l in lights],
        )

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return PointLight(self.positions[i], self.brightness[i], self.directions[i], self.mu[i])
        return LightSet(self.positions[i], self.brightness[i], self.directions[i], self.mu[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def replace(self, **changes):
        fields = dict(positions=self.positions, brightness=self.brightness,
                      directions=self.directions, mu=self.mu)
        fields.update(changes)
        return LightSet(**fields)


def _as_lightset(lights):
    if isinstance(lights, LightSet):
        return lights
    if isinstance(lights, PointLight):
        return LightSet.from_lights([lights])
    return LightSet.from_lights(lights)


def lighting_vector(light, X):
    """Unit surface-to-light direction and distance for points ``X`` (..., 3)."""
    L = light.position - np.asarray(X, dtype=np.float64)
    dist = np.linalg.norm(L, axis=-1)
    if np.any(dist == 0):
        raise DomainError("surface point coincides with the light position")
    return L / dist[..., None], dist


def anisotropy_cosine(direction, L_hat):
    """Cosine between the light-to-surface ray ``-L_hat`` and the principal direction."""
    return -np.sum(L_hat * direction, axis=-1)


def attenuation(light, X):
    """RGB attenuation of a single light at points ``X``; zero behind the emitter."""
    L_hat, dist = lighting_vector(light, X)
    cos = anisotropy_cosine(light.direction, L_hat)
    g = np.where(cos > 0, np.maximum(cos, 0.0) ** light.mu, 0.0) / dist**2
    return g[..., None] * light.brightness


@dataclass(frozen=True, eq=False)
class LightField:
    """Per-light, per-point lighting: directions (M,...,3), geometric falloff
    (M,...), RGB attenuation (M,...,3) and a validity flag (M,...)."""

    directions: np.ndarray
    distances: np.ndarray
    falloff: np.ndarray
    attenuation: np.ndarray
    valid: np.ndarray


def light_field(lights, X):
    """Evaluate every light at points ``X`` (..., 3).

    ``falloff`` is the brightness-free part ``(s.D)^mu / dist^2``;
    ``attenuation`` multiplies it by the RGB brightness. ``valid`` is False
    where the point lies behind an emitter.
    """
    lights = _as_lightset(lights)
    X = np.asarray(X, dtype=np.float64)
    extra = (1,) * (X.ndim - 1)
    P = lights.positions.reshape((-1,) + extra + (3,))
    L = P - X[None]
    dist = np.linalg.norm(L, axis=-1)
    if np.any(dist == 0):
        raise DomainError("surface point coincides with a light position")
    L_hat = L / dist[..., None]
    D = lights.directions.reshape((-1,) + extra + (3,))
    cos = -np.sum(L_hat * D, axis=-1)
    valid = cos > 0
    mu = lights.mu.reshape((-1,) + extra)
    falloff = np.where(valid, np.maximum(cos, 0.0) ** mu, 0.0) / dist**2
    phi = lights.brightness.reshape((-1,) + extra + (3,))
    return LightField(L_hat, dist, falloff, falloff[..., None] * phi, valid)


def compensate(images, depth, cam, lights, *, exposure=1.0, include_brightness=True):
    """Divide each image by its light's attenuation at the current depth.

    Parameters
    ----------
    images : ndarray, shape (M, H, W, 3)
        Linear intensities, one image per light.
    depth : DepthMap
    cam : CameraIntrinsics
    lights : LightSet or sequence of PointLight
    exposure : float
        Global gain the images were captured with.
    include_brightness : bool
        When False only the geometric falloff is divided out, leaving the
        per-channel brightness for the observation-map normalisation.

    Returns
    -------
    samples : ndarray, shape (M, H, W, 3)
        Compensated reflectance samples; zero where invalid.
    valid : ndarray of bool, shape (M, H, W)
        False outside the depth mask and where attenuation vanishes.
    """
    lights = _as_lightset(lights)
    images = np.asarray(images, dtype=np.float64)
    if images.shape[:1] != (len(lights),) or images.shape[1:3] != depth.shape:
        raise ValueError(f"image stack {images.shape} does not match {len(lights)} lights "
                         f"and depth {depth.shape}")
    mask = depth.mask
    samples = np.zeros(images.shape)
    valid = np.zeros(images.shape[:3], dtype=bool)
    if not mask.any():
        return samples, valid
    vv, uu = np.nonzero(mask)
    X = back_project(cam, uu, vv, depth.values[mask])
    field = light_field(lights, X)
    denom = field.attenuation if include_brightness else field.falloff[..., None]
    denom = exposure * denom
    ok = field.valid & np.all(denom > 0, axis=-1)
    safe = np.where(ok[..., None], denom, 1.0)
    samples[:, vv, uu] = np.where(ok[..., None], images[:, vv, uu] / safe, 0.0)
    valid[:, vv, uu] = ok
    return samples, valid
