"""Iterative near-field reconstruction and evaluation metrics.

Starting from a fronto-parallel plane at the approximate object distance,
each iteration divides the images by the light attenuation at the current
depth, builds one observation map per pixel, regresses normals and integrates
them into a new depth, which becomes the prior for the next iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import (
    DepthMap, NormalMap, angular_error_deg, back_project, flat_plane_init,
    normals_from_depth, viewing_vector,
)
from .integrator import IntegratorConfig, integrate, normals_to_gradients
from .lighting import _as_lightset, compensate, light_field
from .obsmap import build_maps
from .regressor import LambertianRegressor

FLAT_NORMAL = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class ReconstructionConfig:
    mean_distance: float
    iterations: int = 2
    regressor: object = "lambertian"
    integrator: IntegratorConfig = IntegratorConfig()
    d: int = 32
    exposure: float = 1.0
    saturation: float = 1.0
    chunk: int = 4096

    def __post_init__(self):
        if not self.mean_distance > 0:
            raise ValueError("mean_distance must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")


@dataclass
class IterationRecord:
    depth: DepthMap
    normals: NormalMap
    normal_change_deg: float


@dataclass
class Reconstruction:
    depth: DepthMap
    normals: NormalMap
    normals_from_depth: NormalMap
    history: list = field(default_factory=list)


def resolve_regressor(spec):
    """``"lambertian"``, ``"net:<checkpoint>"`` or any object with ``predict_batch``."""
    if hasattr(spec, "predict_batch"):
        return spec
    if spec == "lambertian":
        return LambertianRegressor()
    if isinstance(spec, str) and spec.startswith("net:"):
        from .regressor.network import load_checkpoint
        return load_checkpoint(spec[4:])
    raise ValueError(f"unknown regressor {spec!r}; use 'lambertian' or 'net:<checkpoint>'")


def _check_inputs(images, mask, calib):
    images = np.asarray(images, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    lights = _as_lightset(calib.lights)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected an (M, H, W, 3) image stack, got {images.shape}")
    if images.shape[0] != len(lights):
        raise ValueError(f"{images.shape[0]} images but {len(lights)} calibrated lights")
    if images.shape[1:3] != calib.camera.shape or mask.shape != calib.camera.shape:
        raise ValueError("images, mask and camera resolution disagree")
    if not mask.any():
        raise ValueError("mask is empty")
    return images, mask, lights


def _regress(regressor, directions, samples, valid, brightness, views, d, chunk):
    """Normals (P, 3) and a success flag per pixel, processed in chunks."""
    P = len(views)
    normals = np.zeros((P, 3))
    ok = np.zeros(P, dtype=bool)
    for s in range(0, P, chunk):
        sl = slice(s, min(s + chunk, P))
        maps = build_maps(directions[sl], samples[sl], valid[sl], brightness, views[sl], d)
        has = maps.occupancy.any(axis=(1, 2))
        if has.any():
            normals[sl][has] = regressor.predict_batch(maps[np.flatnonzero(has)])
        ok[sl] = has
    return normals, ok


def _normal_map(shape, vv, uu, normals, ok):
    values = np.zeros(shape + (3,))
    mask = np.zeros(shape, dtype=bool)
    values[vv[ok], uu[ok]] = normals[ok]
    mask[vv[ok], uu[ok]] = True
    return NormalMap(values, mask)


def _mean_change(prev, normals):
    both = prev.mask & normals.mask
    if not both.any():
        return float("nan")
    return float(angular_error_deg(prev.values[both], normals.values[both]).mean())


def _iterate(images, mask, calib, cfg, init_depth, observe):
    cam = calib.camera
    regressor = resolve_regressor(cfg.regressor)
    depth = init_depth if init_depth is not None else flat_plane_init(cam, mask, cfg.mean_distance)
    prev = NormalMap(np.where(mask[..., None], FLAT_NORMAL, 0.0), mask)
    history = []
    for _ in range(cfg.iterations):
        vv, uu = np.nonzero(depth.mask)
        directions, samples, valid = observe(depth, vv, uu)
        views = viewing_vector(cam, uu, vv)
        normals, ok = _regress(regressor, directions, samples, valid,
                               calib.lights.brightness, views, cfg.d, cfg.chunk)
        nmap = _normal_map(cam.shape, vv, uu, normals, ok)
        if not nmap.mask.any():
            raise DomainError("no pixel has a usable sample")
        change = _mean_change(prev, nmap)
        depth = integrate(normals_to_gradients(cam, nmap), depth, cfg.integrator)
        history.append(IterationRecord(depth, nmap, change))
        prev = nmap
    nfs = normals_from_depth(cam, depth)
    return Reconstruction(depth, prev, nfs, history)


def _usable(images, cfg):
    return np.all(images < cfg.saturation, axis=-1)


def reconstruct(images, mask, calib, cfg, init_depth=None):
    """Reconstruct depth and normals from a near-field image stack.

    Parameters
    ----------
    images : ndarray, shape (M, H, W, 3)
        Linear images in [0, 1], one per calibrated light.
    mask : ndarray of bool, shape (H, W)
    calib : CalibrationFile
    cfg : ReconstructionConfig
    init_depth : DepthMap, optional
        Replaces the flat-plane initialisation.

    Returns
    -------
    Reconstruction
        Final depth, regressed normals, normals differentiated from the
        depth, and one :class:`IterationRecord` per iteration.
    """
    images, mask, lights = _check_inputs(images, mask, calib)
    usable = _usable(images, cfg)

    def observe(depth, vv, uu):
        samples, valid = compensate(images, depth, calib.camera, lights,
                                    exposure=cfg.exposure, include_brightness=False)
        X = back_project(calib.camera, uu, vv, depth.values[vv, uu])
        directions = light_field(lights, X).directions
        valid = valid & usable
        return (directions.transpose(1, 0, 2), samples[:, vv, uu].transpose(1, 0, 2),
                valid[:, vv, uu].T)

    return _iterate(images, mask, calib, cfg, init_depth, observe)


def naive_reconstruct(images, mask, calib, cfg, init_depth=None):
    """Far-field baseline: raw intensities and one fixed direction per light.

    Each light's direction is taken from the masked centroid pixel
    back-projected to ``cfg.mean_distance``.
    """
    images, mask, lights = _check_inputs(images, mask, calib)
    usable = _usable(images, cfg)
    cam = calib.camera
    vv, uu = np.nonzero(mask)
    centroid = back_project(cam, uu.mean(), vv.mean(), cfg.mean_distance)
    fixed = light_field(lights, centroid).directions

    def observe(depth, vv, uu):
        P = len(vv)
        directions = np.broadcast_to(fixed, (P,) + fixed.shape)
        samples = images[:, vv, uu].transpose(1, 0, 2) / cfg.exposure
        return directions, samples, usable[:, vv, uu].T

    return _iterate(images, mask, calib, cfg, init_depth, observe)


@dataclass
class EvalReport:
    mae_deg: float
    mze_mm: float
    mae_nfs_deg: float = float("nan")
    n_pixels: int = 0
    angular_error: np.ndarray = None
    depth_error_mm: np.ndarray = None


def evaluate(pred_depth, pred_normals, gt_depth, gt_normals, mask=None, *,
             nfs_normals=None, align_mean_z=False):
    """Mean angular error (degrees) and mean absolute depth error (mm).

    The comparison covers pixels valid in every map and in ``mask``. With
    ``align_mean_z`` the predicted depth is shifted to the ground-truth mean
    before measuring depth error.
    """
    shape = gt_depth.shape
    for m in (pred_depth, pred_normals, gt_normals):
        if m.shape != shape:
            raise ValueError("prediction and ground-truth shapes differ")
    common = pred_depth.mask & pred_normals.mask & gt_depth.mask & gt_normals.mask
    if mask is not None:
        common &= np.asarray(mask, dtype=bool)
    if nfs_normals is not None:
        common &= nfs_normals.mask
    if not common.any():
        raise DomainError("empty evaluation mask")

    ang = np.zeros(shape)
    ang[common] = angular_error_deg(pred_normals.values[common], gt_normals.values[common])
    zp = pred_depth.values[common]
    zg = gt_depth.values[common]
    if align_mean_z:
        zp = zp - zp.mean() + zg.mean()
    dz = np.zeros(shape)
    dz[common] = 1e3 * np.abs(zp - zg)
    nfs = float("nan")
    if nfs_normals is not None:
        nfs = float(angular_error_deg(nfs_normals.values[common], gt_normals.values[common]).mean())
    return EvalReport(float(ang[common].mean()), float(dz[common].mean()), nfs,
                      int(common.sum()), ang, dz)
