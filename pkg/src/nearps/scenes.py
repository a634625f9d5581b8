"""Analytic test scenes and light rigs for hermetic end-to-end runs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, NormalMap, orient_towards_camera
from .lighting import LightSet

DEFAULT_CAMERA = CameraIntrinsics(600.0, 600.0, 128.0, 128.0, 256, 256)

# Pixels whose normal is closer than this cosine to grazing are excluded;
# their attenuation and gradients are numerically meaningless.
MIN_VIEW_COSINE = 0.2


@dataclass(frozen=True, eq=False)
class Scene:
    camera: CameraIntrinsics
    depth: DepthMap
    normals: NormalMap

    @property
    def mean_distance(self):
        return float(self.depth.values[self.depth.mask].mean())


def _finish(cam, z, N, mask):
    r = cam.rays()
    V = -r / np.linalg.norm(r, axis=-1, keepdims=True)
    N = orient_towards_camera(N / np.linalg.norm(N, axis=-1, keepdims=True))
    mask = mask & (np.sum(N * V, axis=-1) >= MIN_VIEW_COSINE) & (z > 0)
    depth = DepthMap(np.where(mask, z, 0.0), mask)
    normals = NormalMap(np.where(mask[..., None], N, 0.0), mask)
    return Scene(cam, depth, normals)


def sphere_scene(cam=DEFAULT_CAMERA, radius=0.05, center_z=0.30):
    """Sphere centred on the optical axis; depth from exact ray intersection."""
    r = cam.rays()
    C = np.array([0.0, 0.0, center_z])
    b = r @ C
    a = np.sum(r * r, axis=-1)
    disc = b * b - a * (C @ C - radius**2)
    hit = disc > 0
    t = (b - np.sqrt(np.where(hit, disc, 0.0))) / a
    X = r * t[..., None]
    return _finish(cam, np.where(hit, t, 0.0), (X - C) / radius, hit)


def plane_scene(cam=DEFAULT_CAMERA, distance=0.30, slope=(0.3, -0.2)):
    """Slanted plane ``z = distance + sx * x + sy * y``."""
    r = cam.rays()
    sx, sy = slope
    z = distance / (1.0 - sx * r[..., 0] - sy * r[..., 1])
    N = np.broadcast_to(np.array([sx, sy, -1.0]), r.shape).copy()
    return _finish(cam, z, N, np.ones(cam.shape, dtype=bool))


def wave_scene(cam=DEFAULT_CAMERA, distance=0.30, amplitude=0.01, wavelength=0.06):
    """Height field ``z = distance + A sin(kx) cos(ky)`` over the image (fixed-point ray solve)."""
    r = cam.rays()
    k = 2.0 * np.pi / wavelength
    z = np.full(cam.shape, distance)
    for _ in range(50):
        x, y = r[..., 0] * z, r[..., 1] * z
        z = distance + amplitude * np.sin(k * x) * np.cos(k * y)
    x, y = r[..., 0] * z, r[..., 1] * z
    dzdx = amplitude * k * np.cos(k * x) * np.cos(k * y)
    dzdy = -amplitude * k * np.sin(k * x) * np.sin(k * y)
    N = np.stack([dzdx, dzdy, -np.ones_like(z)], axis=-1)
    return _finish(cam, z, N, np.ones(cam.shape, dtype=bool))


SCENES = {"sphere": sphere_scene, "plane": plane_scene, "wave": wave_scene}


def ring_lights(n=15, radius=0.10, brightness=0.055, mu=0.5, z=0.0):
    """LEDs evenly spaced on a ring around the camera, facing the scene.

    Brightness varies slightly per light and channel, as real LEDs do.
    """
    ang = 2.0 * np.pi * np.arange(n) / n
    pos = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n, z)], axis=1)
    m = np.arange(n)[:, None]
    c = np.arange(3)[None, :]
    phi = brightness * (1.0 + 0.1 * np.sin(1.7 * m + 2.1 * c))
    return LightSet(pos, phi, np.tile([0.0, 0.0, 1.0], (n, 1)), np.full(n, mu))


def far_field_lights(lights, target, distance=6.0):
    """Move each light along its direction from ``target`` out to ``distance``.

    Lights are re-aimed at the target and brightened by the squared distance
    ratio, so image intensities stay comparable to the near-field rig.
    """
    target = np.asarray(target, dtype=np.float64)
    offset = lights.positions - target
    dist = np.linalg.norm(offset, axis=1, keepdims=True)
    unit = offset / dist
    phi = lights.brightness * (distance / dist) ** 2
    return LightSet(target + distance * unit, phi, -unit, lights.mu)


LIGHT_RIGS = {
    "ring15": lambda: ring_lights(),
    "far15": lambda: far_field_lights(ring_lights(), [0.0, 0.0, 0.30]),
}


def calibration_rig(seed=0, n=8, radius=0.08):
    """Ground-truth LEDs for calibration tests: a ring with slightly tilted
    principal directions and varied angular exponents."""
    rng = np.random.default_rng(seed)
    ang = 2.0 * np.pi * np.arange(n) / n + rng.uniform(-0.2, 0.2, n)
    pos = np.stack([radius * np.cos(ang), radius * np.sin(ang), rng.uniform(-0.01, 0.01, n)], axis=1)
    tilt = np.radians(rng.uniform(0.0, 4.0, n))
    az = rng.uniform(0.0, 2.0 * np.pi, n)
    D = np.stack([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)], axis=1)
    phi = rng.uniform(0.04, 0.08, (n, 3))
    mu = rng.uniform(0.3, 0.9, n)
    return LightSet(pos, phi, D, mu)


def calibration_captures(cam, lights, distances=(0.25, 0.35), normal=(0.0, 0.0, -1.0),
                         stride=4, levels=65536, seed=0):
    """Render the reference plane (albedo 0.5) at each distance under every light.

    Returns one :class:`~nearps.calibration.PlanePose` per distance, using
    every ``stride``-th pixel. ``levels=None`` renders without quantisation.
    """
    from .calibration import ALBEDO, PlanePose, plane_points
    from .renderer import Material, QuantizationSpec, render_scene

    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    poses = []
    for dist in distances:
        u, v, X = plane_points(cam, [0.0, 0.0, dist], normal, stride)
        z = np.zeros(cam.shape)
        mask = np.zeros(cam.shape, dtype=bool)
        z[v.astype(int), u.astype(int)] = X[:, 2]
        mask[v.astype(int), u.astype(int)] = True
        depth = DepthMap(z, mask)
        N = NormalMap(np.where(mask[..., None], normal, 0.0), mask)
        img = render_scene(cam, depth, N, Material(ALBEDO), lights,
                           quant=None if levels is None else QuantizationSpec(levels), seed=seed)
        poses.append(PlanePose(X, normal, img[:, v.astype(int), u.astype(int)]))
    return poses
