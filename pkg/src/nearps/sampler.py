"""Synthetic per-pixel training data.

A record is produced in four steps:

1. ``sample_config`` draws a surface point inside a virtual camera frustum,
   a light arrangement scaled to its depth, a normal, a material and global
   illumination settings (or copies the lights of a calibration file).
2. ``perturb`` derives two parameter sets: the one used to render and the one
   used to build the observation map (depth estimate and lights both noisy).
3. The point is rendered with the render parameters.
4. Intensities are compensated with the map parameters and binned into an
   observation map, paired with the true normal.

In *general* mode the rendering uses the sampled parameters and the map the
perturbed ones. In *specific* mode the map uses the calibration exactly and
the renderer sees a perturbed copy of it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationFile
from .geometry import CameraIntrinsics
from .lighting import LightSet, light_field
from .obsmap import ObservationMap, build_map
from .renderer import GlobalIllumApprox, Material, QuantizationSpec, compose_intensity, shade

GRID_SHAPE = (24, 12)
MIN_LIGHTS, MAX_LIGHTS = 15, 288
# With a quantising sensor, a sample at this level is clipped and left out of the map.
SATURATION_LEVEL = 1.0


@dataclass(frozen=True)
class SamplerOptions:
    materials: str = "mixed"
    global_illumination: bool = True
    quantization: QuantizationSpec | None = QuantizationSpec(1024)
    d: int = 32
    z_range: tuple = (0.10, 1.70)
    f_range: tuple = (1.0, 10.0)

    def __post_init__(self):
        if self.materials not in ("lambertian", "mixed"):
            raise ValueError(f"unknown material family {self.materials!r}")


@dataclass(frozen=True)
class PerturbationSpec:
    """Magnitudes of the setup noise injected between rendering and mapping.

    Multiplicative magnitudes are applied as ``1 + U(-r, r)``, additive ones as
    ``U(-r, r)``; ``position_rel`` is relative to the sampled depth.
    """

    depth_rel_std: float = 0.05
    position_rel: float = 0.001
    brightness_rel: float = 0.01
    direction_abs: float = 0.1
    mu_add: float = 0.1
    mu_rel: float = 0.10
    systematic: bool = True

    def __post_init__(self):
        for name in ("depth_rel_std", "position_rel", "brightness_rel", "direction_abs",
                     "mu_add", "mu_rel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, systematic=False)


@dataclass(frozen=True, eq=False)
class ConfigSample:
    uv: np.ndarray
    f_norm: float
    z: float
    X: np.ndarray
    lights: LightSet
    normal: np.ndarray
    material: Material
    gi: GlobalIllumApprox | None


@dataclass(frozen=True, eq=False)
class SetupParams:
    z: float
    X: np.ndarray
    lights: LightSet


@dataclass(frozen=True, eq=False)
class TrainingRecord:
    map: ObservationMap
    target: np.ndarray
    metadata: dict = field(default_factory=dict)


def _log_uniform(rng, lo, hi, size=None):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sample_light_grid(rng, z):
    """Lights on a holed rectangle parallel to the image plane, scaled by depth ``z``."""
    sx, sy = rng.uniform(0.5 * z, 3.0 * z, 2)
    # the hole may not swallow more than a quarter of the rectangle
    hx = min(rng.uniform(0.0, 0.66 * z), 0.5 * sx)
    hy = min(rng.uniform(0.0, 0.66 * z), 0.5 * sy)
    gx = np.linspace(-sx / 2, sx / 2, GRID_SHAPE[0])
    gy = np.linspace(-sy / 2, sy / 2, GRID_SHAPE[1])
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    keep = (np.abs(xx) > hx / 2) | (np.abs(yy) > hy / 2)
    xy = np.stack([xx[keep], yy[keep]], axis=-1)
    count = int(rng.integers(MIN_LIGHTS, min(MAX_LIGHTS, len(xy)) + 1))
    chosen = xy[np.sort(rng.choice(len(xy), size=count, replace=False))]
    offset = rng.uniform(0.0, 0.25 * z)
    height = offset + rng.uniform(-0.05 * z, 0.05 * z, count)
    return np.column_stack([chosen, height])


def _sample_lights(rng, z):
    pos = sample_light_grid(rng, z)
    m = len(pos)
    phi = _log_uniform(rng, 0.25, 4.0, (m, 3))
    mu = rng.uniform(0.0, 3.0, m)
    d = rng.uniform(-0.1, 0.1, (m, 3))
    d[:, 2] += 1.0
    return LightSet(pos, phi, _unit(d), mu)


def _sample_normal(rng, view):
    while True:
        n = _unit(rng.normal(size=3))
        if n @ view < 0:
            n = -n
        if n @ view >= 0.05 and n[2] <= 0:
            return n


def _sample_material(rng, family):
    albedo = rng.uniform(0.05, 1.0, 3)
    if family == "lambertian":
        return Material(albedo)
    metallic = rng.uniform(0.0, 1.0) if rng.random() < 0.5 else 0.0
    return Material(albedo, rng.uniform(0.0, 1.0), _log_uniform(rng, 1.0, 1000.0), metallic)


def sample_config(rng, mode="general", options=SamplerOptions()):
    """Draw one configuration.

    ``mode`` is ``"general"`` or a :class:`CalibrationFile` (specific mode:
    camera and lights come from the calibration).
    """
    z = rng.uniform(*options.z_range)
    if isinstance(mode, CalibrationFile):
        cam = mode.camera
        half = cam.width / 2.0
        u_pix = rng.uniform(0.0, cam.width)
        v_pix = rng.uniform(0.0, cam.height)
        uv = np.array([(u_pix - cam.cx) / half, (v_pix - cam.cy) / half])
        f_norm = cam.f_norm
        X = np.array([(u_pix - cam.cx) * z / cam.fx, (v_pix - cam.cy) * z / cam.fy, z])
        lights = mode.lights
    elif mode == "general":
        uv = rng.uniform(-1.0, 1.0, 2)
        f_norm = rng.uniform(*options.f_range)
        X = np.array([uv[0] * z / f_norm, uv[1] * z / f_norm, z])
        lights = _sample_lights(rng, z)
    else:
        raise ValueError(f"mode must be 'general' or a CalibrationFile, got {mode!r}")

    view = -X / np.linalg.norm(X)
    normal = _sample_normal(rng, view)
    material = _sample_material(rng, options.materials)
    gi = None
    if options.global_illumination:
        field_ = light_field(lights, X)
        mean_b = float(np.mean(shade(normal, field_.directions, view, material)))
        gi = GlobalIllumApprox(
            shadow_prob=rng.uniform(0.0, 0.35),
            ambient=rng.uniform(0.0, 0.05, 3),
            self_reflection=rng.uniform(0.0, 0.15) * mean_b * np.ones(3),
        )
    return ConfigSample(uv, float(f_norm), float(z), X, lights, normal, material, gi)


def _perturb_lights(lights, spec, rng, z):
    m = len(lights)
    draws = [m] + ([1] if spec.systematic else [])
    pos, phi, dirs, mu = lights.positions, lights.brightness, lights.directions, lights.mu
    for n in draws:
        if spec.position_rel > 0:
            r = spec.position_rel * z
            pos = pos + rng.uniform(-r, r, (n, 3))
        if spec.brightness_rel > 0:
            phi = phi * (1.0 + rng.uniform(-spec.brightness_rel, spec.brightness_rel, (n, 3)))
        if spec.direction_abs > 0:
            dirs = _unit(dirs + rng.uniform(-spec.direction_abs, spec.direction_abs, (n, 3)))
        if spec.mu_add > 0:
            mu = mu + rng.uniform(-spec.mu_add, spec.mu_add, n)
        if spec.mu_rel > 0:
            mu = mu * (1.0 + rng.uniform(-spec.mu_rel, spec.mu_rel, n))
        mu = np.maximum(mu, 0.0)
    return LightSet(pos, phi, dirs, mu)


def perturb(config, spec, rng, order="forward"):
    """Return ``(render_params, map_params)``.

    The depth used for mapping is always ``z' = z + N(0, depth_rel_std * z)``
    (redrawn until positive). ``order="forward"`` renders with the sampled
    lights and maps with perturbed ones; ``"reverse"`` maps with the sampled
    (calibrated) lights and renders with perturbed ones.
    """
    if order not in ("forward", "reverse"):
        raise ValueError("order must be 'forward' or 'reverse'")
    z = config.z
    z_map = z
    if spec.depth_rel_std > 0:
        while True:
            z_map = z + rng.normal(0.0, spec.depth_rel_std * z)
            if z_map > 0:
                break
    X_map = config.X * (z_map / z) if z_map != z else config.X
    noisy = _perturb_lights(config.lights, spec, rng, z)
    if order == "forward":
        return SetupParams(z, config.X, config.lights), SetupParams(z_map, X_map, noisy)
    return SetupParams(z, config.X, noisy), SetupParams(z_map, X_map, config.lights)


def render_record(config, render_params, map_params, options, rng):
    """Render one configuration and build its observation map.

    Returns ``None`` when no light yields a usable sample.
    """
    X = render_params.X
    view = -X / np.linalg.norm(X)
    field_r = light_field(render_params.lights, X)
    a_max = field_r.attenuation.max()
    if not a_max > 0:
        return None
    exposure = 1.0 / a_max
    B = shade(config.normal, field_r.directions, view, config.material)
    shadowed = np.zeros(len(render_params.lights), dtype=bool)
    if config.gi is not None and config.gi.shadow_prob > 0:
        shadowed = rng.random(len(shadowed)) < config.gi.shadow_prob
    intensity = compose_intensity(field_r.attenuation, B, shadowed, config.gi,
                                  options.quantization, exposure)

    field_m = light_field(map_params.lights, map_params.X)
    valid = field_m.valid & (field_m.falloff > 0)
    if options.quantization is not None:
        valid &= np.all(intensity < SATURATION_LEVEL, axis=-1)
    if not valid.any():
        return None
    denom = exposure * np.where(valid, field_m.falloff, 1.0)
    samples = intensity / denom[:, None]
    obs = build_map(field_m.directions, samples, valid, map_params.lights.brightness, view, options.d)
    meta = {"z": config.z, "f_norm": config.f_norm, "n_lights": len(render_params.lights)}
    return TrainingRecord(obs, config.normal, meta)


def generate_record(rng, mode="general", spec=PerturbationSpec(), options=SamplerOptions()):
    """Sample, perturb, render and map one training point (redrawing on failure)."""
    order = "forward" if isinstance(mode, str) else "reverse"
    while True:
        config = sample_config(rng, mode, options)
        render_params, map_params = perturb(config, spec, rng, order)
        record = render_record(config, render_params, map_params, options, rng)
        if record is not None:
            return record


def record_rng(seed, index):
    """Independent generator for record ``index`` of stream ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def record_stream(seed, mode="general", spec=PerturbationSpec(), options=SamplerOptions(),
                  start=0, count=None):
    """Yield records ``start, start + 1, ...``; each is a pure function of (seed, index)."""
    i = start
    while count is None or i < start + count:
        yield generate_record(record_rng(seed, i), mode, spec, options)
        i += 1


_ARCHIVE_HEADER = struct.Struct("<II")


def write_archive(path, records, d=None):
    """Write records as a little-endian float32 archive: header (d, count), then
    for each record the d*d*6 map followed by the 3-vector target."""
    records = list(records)
    if d is None:
        d = records[0].map.d if records else 32
    with open(path, "wb") as f:
        f.write(_ARCHIVE_HEADER.pack(d, len(records)))
        for r in records:
            if r.map.d != d:
                raise ValueError("all records in an archive must share d")
            f.write(r.map.as_array().astype("<f4").tobytes())
            f.write(np.asarray(r.target, dtype="<f4").tobytes())


def read_archive(path):
    """Return ``(maps, targets)`` with shapes (n, d, d, 6) and (n, 3)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _ARCHIVE_HEADER.size:
        raise ValueError("archive too short for header")
    d, n = _ARCHIVE_HEADER.unpack_from(raw)
    rec = d * d * 6 + 3
    payload = np.frombuffer(raw, dtype="<f4", offset=_ARCHIVE_HEADER.size)
    if payload.size != n * rec:
        raise ValueError(f"archive payload holds {payload.size} floats, expected {n * rec}")
    payload = payload.reshape(n, rec)
    return payload[:, :-3].reshape(n, d, d, 6).astype(np.float32), payload[:, -3:].astype(np.float32)
