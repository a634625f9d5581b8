"""Dataset directories, PFM float maps and 16-bit PNG images.

Layout of a dataset directory::

    light_000.png ... light_<M-1>.png   16-bit RGB, linear, one per light
    mask.png                            8-bit, nonzero = valid
    calib.txt                           calibration file (camera + lights)
    gt_depth.pfm, gt_normals.pfm        optional ground truth
    scene.json                          optional metadata (e.g. mean_distance)
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np
import png

from .calibration import CalibrationFile
from .errors import DomainError
from .geometry import DepthMap, NormalMap

_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def write_pfm(path, data):
    """Write an (H, W) or (H, W, 3) float map; rows are stored bottom to top."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        kind = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) maps, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("PFM data must be finite")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    """Read a PFM file (either byte order) into a float32 array, top row first."""
    with open(path, "rb") as f:
        raw = f.read()
    m = _PFM_HEADER.match(raw)
    if not m:
        raise DomainError(f"{path}: malformed PFM header")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
    try:
        scale = float(scale)
    except ValueError:
        raise DomainError(f"{path}: malformed PFM scale {scale!r}") from None
    if scale == 0:
        raise DomainError(f"{path}: PFM scale must be nonzero")
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    payload = raw[m.end():]
    if len(payload) < 4 * count:
        raise DomainError(f"{path}: PFM payload too short ({len(payload)} < {4 * count} bytes)")
    data = np.frombuffer(payload, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


def write_png16(path, image):
    """Write an (H, W, 3) image in [0, 1] as 16-bit RGB PNG (rounded to 1/65535)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    q = np.floor(np.clip(image, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        png.Writer(w, h, greyscale=False, bitdepth=16).write(f, q.reshape(h, w * 3))


def read_png(path):
    """Read a PNG as float in [0, 1] with shape (H, W, channels)."""
    try:
        w, h, rows, info = png.Reader(filename=path).asDirect()
        arr = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    except png.Error as exc:
        raise DomainError(f"{path}: unreadable PNG ({exc})") from exc
    planes = info["planes"]
    return arr.reshape(h, w, planes) / float(2 ** info["bitdepth"] - 1)


def write_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        png.Writer(w, h, greyscale=True, bitdepth=8).write(f, (mask * 255).astype(np.uint8))


def read_mask(path):
    return np.any(read_png(path) > 0, axis=-1)


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    mask: np.ndarray
    calib: CalibrationFile
    gt_depth: DepthMap | None = None
    gt_normals: NormalMap | None = None
    meta: dict | None = None


def light_filename(i):
    return f"light_{i:03d}.png"


def save_dataset(path, images, mask, calib, gt_depth=None, gt_normals=None, meta=None):
    """Write a dataset directory (created if missing)."""
    os.makedirs(path, exist_ok=True)
    images = np.asarray(images)
    if len(images) != len(calib.lights):
        raise ValueError(f"{len(images)} images but {len(calib.lights)} calibrated lights")
    for i, img in enumerate(images):
        write_png16(os.path.join(path, light_filename(i)), img)
    write_mask(os.path.join(path, "mask.png"), mask)
    with open(os.path.join(path, "calib.txt"), "w") as f:
        f.write(calib.dumps())
    if gt_depth is not None:
        write_pfm(os.path.join(path, "gt_depth.pfm"), gt_depth.values)
    if gt_normals is not None:
        write_pfm(os.path.join(path, "gt_normals.pfm"), gt_normals.values)
    if meta is not None:
        with open(os.path.join(path, "scene.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


def load_calibration(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise DomainError(f"cannot read calibration {path}: {exc.strerror}") from exc
    return CalibrationFile.loads(text)


def load_dataset(path):
    """Load a dataset directory; ground truth and metadata are optional."""
    if not os.path.isdir(path):
        raise DomainError(f"dataset directory {path} does not exist")
    calib = load_calibration(os.path.join(path, "calib.txt"))
    mask_path = os.path.join(path, "mask.png")
    if not os.path.exists(mask_path):
        raise DomainError(f"{path}: missing mask.png")
    mask = read_mask(mask_path)
    if mask.shape != calib.camera.shape:
        raise DomainError(f"mask is {mask.shape[1]}x{mask.shape[0]} but camera is "
                          f"{calib.camera.width}x{calib.camera.height}")
    images = []
    for i in range(len(calib.lights)):
        p = os.path.join(path, light_filename(i))
        if not os.path.exists(p):
            raise DomainError(f"missing image for light {i}: {light_filename(i)}")
        img = read_png(p)
        if img.shape != mask.shape + (3,):
            raise DomainError(f"{light_filename(i)} has shape {img.shape}, expected {mask.shape + (3,)}")
        images.append(img)
    extra = os.path.join(path, light_filename(len(calib.lights)))
    if os.path.exists(extra):
        raise DomainError(f"found {light_filename(len(calib.lights))} but calibration has "
                          f"only {len(calib.lights)} lights")

    gt_depth = gt_normals = meta = None
    p = os.path.join(path, "gt_depth.pfm")
    if os.path.exists(p):
        z = read_pfm(p).astype(np.float64)
        gt_depth = DepthMap(z, z > 0)
    p = os.path.join(path, "gt_normals.pfm")
    if os.path.exists(p):
        n = read_pfm(p).astype(np.float64)
        norm = np.linalg.norm(n, axis=-1)
        valid = norm > 0.5
        n = np.where(valid[..., None], n / np.where(valid, norm, 1.0)[..., None], 0.0)
        gt_normals = NormalMap(n, valid)
    p = os.path.join(path, "scene.json")
    if os.path.exists(p):
        with open(p) as f:
            meta = json.load(f)
    return Dataset(np.stack(images), mask, calib, gt_depth, gt_normals, meta)
