"""Per-pixel reflectance renderer used for synthetic training data and test scenes.

The BRDF is Lambertian plus a Blinn-Phong lobe whose colour is tinted by the
albedo for metallic materials. Global illumination is approximated per pixel
inside the reflectance (random light occlusion, additive ambient and
inter-reflected light) before the point-light attenuation is applied, and the
sensor saturates and quantises to ``levels`` integer values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import back_project, viewing_vector
from .lighting import _as_lightset, light_field


@dataclass(frozen=True, eq=False)
class Material:
    """BRDF parameters; fields may be scalars or per-pixel arrays."""

    albedo: np.ndarray = (0.5, 0.5, 0.5)
    specular_weight: float = 0.0
    shininess: float = 1.0
    metallic: float = 0.0

    def __post_init__(self):
        rho = np.array(self.albedo, dtype=np.float64)
        if rho.ndim == 0:
            rho = np.full(3, float(rho))
        s = np.asarray(self.specular_weight, dtype=np.float64)
        k = np.asarray(self.shininess, dtype=np.float64)
        met = np.asarray(self.metallic, dtype=np.float64)
        if rho.shape[-1] != 3 or np.any((rho < 0) | (rho > 1)):
            raise ValueError("albedo must be an RGB triple in [0, 1]")
        if np.any((s < 0) | (s > 1)) or np.any((met < 0) | (met > 1)):
            raise ValueError("specular_weight and metallic must lie in [0, 1]")
        if np.any(k < 1):
            raise ValueError("shininess must be >= 1")
        object.__setattr__(self, "albedo", rho)
        object.__setattr__(self, "specular_weight", s)
        object.__setattr__(self, "shininess", k)
        object.__setattr__(self, "metallic", met)

    def take(self, shape, index):
        """Select per-pixel parameters at ``index`` from fields broadcast to ``shape``."""
        rho = np.broadcast_to(self.albedo, tuple(shape) + (3,))[index]
        pick = lambda f: np.broadcast_to(f, shape)[index]
        return Material(rho, pick(self.specular_weight), pick(self.shininess), pick(self.metallic))


@dataclass(frozen=True)
class GlobalIllumApprox:
    shadow_prob: float = 0.0
    ambient: tuple = (0.0, 0.0, 0.0)
    self_reflection: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 <= self.shadow_prob <= 1.0:
            raise ValueError("shadow_prob must lie in [0, 1]")
        amb = tuple(float(a) for a in np.broadcast_to(self.ambient, (3,)))
        refl = tuple(float(a) for a in np.broadcast_to(self.self_reflection, (3,)))
        if min(amb) < 0 or min(refl) < 0:
            raise ValueError("ambient and self_reflection must be non-negative")
        object.__setattr__(self, "ambient", amb)
        object.__setattr__(self, "self_reflection", refl)

    @property
    def is_zero(self):
        return self.shadow_prob == 0 and not any(self.ambient) and not any(self.self_reflection)


@dataclass(frozen=True)
class QuantizationSpec:
    levels: int = 1024

    def __post_init__(self):
        if int(self.levels) != self.levels or self.levels < 2:
            raise ValueError("levels must be an integer >= 2")

    @property
    def step(self):
        return 1.0 / (self.levels - 1)


def quantize(values, spec):
    """Saturate to [0, 1] and round to ``spec.levels`` evenly spaced values.

    Rounding is half away from zero. ``spec=None`` models an ideal linear
    sensor and returns the input unchanged.
    """
    values = np.asarray(values, dtype=np.float64)
    if spec is None:
        return values
    n = spec.levels - 1
    return np.floor(np.clip(values, 0.0, 1.0) * n + 0.5) / n


def shade(N, L, V, material):
    """Evaluate the BRDF for unit vectors ``N``, ``L``, ``V`` (broadcasting on ``...``).

    Returns RGB reflectance with shape ``broadcast(...) + (3,)``.
    """
    N = np.asarray(N, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    rho = material.albedo
    s = material.specular_weight[..., None]
    metallic = material.metallic[..., None]
    shininess = material.shininess[..., None]

    n_dot_l = np.sum(N * L, axis=-1, keepdims=True)
    lit = n_dot_l > 0
    H = L + V
    h_norm = np.linalg.norm(H, axis=-1, keepdims=True)
    H = H / np.where(h_norm > 0, h_norm, 1.0)
    n_dot_h = np.maximum(np.sum(N * H, axis=-1, keepdims=True), 0.0)

    diffuse = rho * np.maximum(n_dot_l, 0.0) * (1.0 - s)
    spec_color = 1.0 + metallic * (rho - 1.0)
    specular = np.where(lit, spec_color * s * n_dot_h**shininess, 0.0)
    return diffuse + specular


def compose_intensity(a, B, shadowed, gi, quant, exposure=1.0):
    """Combine attenuation ``a`` and reflectance ``B`` into sensor values.

    Global illumination lives in the reflectance domain: occluded lights
    (``shadowed``, broadcast against the light axis) lose their direct term,
    and ambient plus inter-reflected light is added before the point-light
    attenuation is applied.
    """
    B = np.where(np.asarray(shadowed)[..., None], 0.0, B)
    if gi is not None:
        B = B + np.asarray(gi.ambient) + np.asarray(gi.self_reflection)
    return quantize(exposure * a * B, quant)


def render_pixel(X, N, material, lights, gi=None, quant=None, rng=None, exposure=1.0):
    """Render one surface point under every light.

    Parameters
    ----------
    X : array_like, shape (3,)
        Surface point in the camera frame (meters, z > 0).
    N : array_like, shape (3,)
        Unit surface normal.
    material : Material
    lights : LightSet or sequence of PointLight
    gi : GlobalIllumApprox, optional
    quant : QuantizationSpec, optional
        ``None`` disables saturation and quantisation.
    rng : numpy.random.Generator, optional
        Needed only when ``gi.shadow_prob > 0``.
    exposure : float
        Global camera gain applied to the direct and reflected signal.

    Returns
    -------
    ndarray, shape (M, 3)
    """
    lights = _as_lightset(lights)
    X = np.asarray(X, dtype=np.float64)
    field = light_field(lights, X)
    V = -X / np.linalg.norm(X)
    B = shade(N, field.directions, V, material)
    shadowed = np.zeros(len(lights), dtype=bool)
    if gi is not None and gi.shadow_prob > 0:
        shadowed = rng.random(len(lights)) < gi.shadow_prob
    return compose_intensity(field.attenuation, B, shadowed, gi, quant, exposure)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x):
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hashed_uniform(seed, *keys):
    """Counter-based uniforms in [0, 1): a pure function of ``(seed, keys)``.

    Keys are broadcast integer arrays (e.g. pixel index, light index), so the
    result does not depend on evaluation order or chunking.
    """
    with np.errstate(over="ignore"):
        h = _splitmix64(np.uint64(seed))
        for k in keys:
            h = _splitmix64(h ^ np.asarray(k, dtype=np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def render_scene(cam, depth, normals, material, lights, gi=None, quant=None, seed=0, exposure=1.0):
    """Render a full image stack, one (H, W, 3) image per light.

    Pixels outside the depth mask are black. Shadow draws come from
    :func:`hashed_uniform` keyed by ``(seed, pixel index, light index)``.
    """
    lights = _as_lightset(lights)
    if depth.shape != cam.shape or normals.shape != cam.shape:
        raise ValueError("depth, normals and camera must share the image shape")
    if not np.array_equal(depth.mask, normals.mask):
        raise ValueError("depth and normal maps must share the same mask")
    H, W = cam.shape
    images = np.zeros((len(lights), H, W, 3))
    mask = depth.mask
    if not mask.any():
        return images
    vv, uu = np.nonzero(mask)
    X = back_project(cam, uu, vv, depth.values[mask])
    V = viewing_vector(cam, uu, vv)
    N = normals.values[mask]
    mat = material.take((H, W), (vv, uu))
    field = light_field(lights, X)
    B = shade(N[None], field.directions, V[None], mat)
    shadowed = np.zeros(field.valid.shape, dtype=bool)
    if gi is not None and gi.shadow_prob > 0:
        pix = (vv * W + uu).astype(np.uint64)
        light_idx = np.arange(len(lights), dtype=np.uint64)[:, None]
        shadowed = hashed_uniform(seed, pix[None, :], light_idx) < gi.shadow_prob
    images[:, vv, uu] = compose_intensity(field.attenuation, B, shadowed, gi, quant, exposure)
    return images
