"""Observation maps: per-pixel reflectance samples binned by light direction.

Sample ``m`` with unit surface-to-light direction ``L`` goes to cell
``(floor(d (Lx + 1) / 2), floor(d (Ly + 1) / 2))`` (clamped to the grid) and
stores ``j_m / phi_m`` per channel. Samples sharing a cell are averaged. The
viewing vector is appended as three constant channels, giving a d x d x 6
network input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True, eq=False)
class ObservationMap:
    """One map, or a batch of maps when the arrays carry leading axes.

    Attributes
    ----------
    rgb : (..., d, d, 3) brightness-normalised samples, zero in empty cells.
    view_vector : (..., 3) unit viewing vector.
    occupancy : (..., d, d) bool.
    light_dirs : (..., d, d, 3) mean light direction of the samples in each
        cell. Not part of the network input; lets closed-form solvers avoid
        the cell-centre quantisation of the direction.
    """

    rgb: np.ndarray
    view_vector: np.ndarray
    occupancy: np.ndarray
    light_dirs: np.ndarray | None = None

    @property
    def d(self):
        return self.rgb.shape[-2]

    @property
    def batch_shape(self):
        return self.rgb.shape[:-3]

    @property
    def view(self):
        return np.broadcast_to(self.view_vector[..., None, None, :], self.rgb.shape)

    def as_array(self, dtype=np.float32):
        """Stack to the (..., d, d, 6) network input."""
        return np.concatenate([self.rgb, self.view], axis=-1).astype(dtype, copy=False)

    def __len__(self):
        if not self.batch_shape:
            raise TypeError("unbatched ObservationMap has no length")
        return self.batch_shape[0]

    def __getitem__(self, i):
        if not self.batch_shape:
            raise TypeError("unbatched ObservationMap is not indexable")
        dirs = None if self.light_dirs is None else self.light_dirs[i]
        return ObservationMap(self.rgb[i], self.view_vector[i], self.occupancy[i], dirs)


def cell_index(L, d):
    """Grid cell of unit directions ``L`` (..., 3) -> (ix, iy) integer arrays."""
    L = np.asarray(L, dtype=np.float64)
    ix = np.clip(np.floor(d * (L[..., 0] + 1.0) / 2.0), 0, d - 1).astype(np.int64)
    iy = np.clip(np.floor(d * (L[..., 1] + 1.0) / 2.0), 0, d - 1).astype(np.int64)
    return ix, iy


def cell_center_directions(d):
    """Unit directions at cell centres, (d, d, 3), with ``Lz <= 0`` (towards the camera)."""
    c = (2.0 * np.arange(d) + 1.0) / d - 1.0
    lx, ly = np.meshgrid(c, c, indexing="ij")
    lz = -np.sqrt(np.maximum(1.0 - lx**2 - ly**2, 0.0))
    L = np.stack([lx, ly, lz], axis=-1)
    return L / np.linalg.norm(L, axis=-1, keepdims=True)


def build_maps(directions, samples, valid, brightness, views, d=32):
    """Vectorised map construction for a batch of pixels.

    Parameters
    ----------
    directions : (P, M, 3) unit surface-to-light vectors.
    samples : (P, M, 3) compensated reflectance samples ``j``.
    valid : (P, M) bool, samples to keep.
    brightness : (M, 3) or (P, M, 3) light brightness ``phi``.
    views : (P, 3) viewing vectors.
    d : int, grid size.

    Returns a batched :class:`ObservationMap`; pixels without any valid sample
    get an empty map (check ``occupancy.any(axis=(1, 2))``).
    """
    if d < 2:
        raise ValueError("grid size d must be >= 2")
    directions = np.asarray(directions, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    P, M = valid.shape
    phi = np.broadcast_to(np.asarray(brightness, dtype=np.float64), (P, M, 3))
    values = samples / phi

    ix, iy = cell_index(directions, d)
    flat = (np.arange(P)[:, None] * d + ix) * d + iy
    flat = flat[valid]
    size = P * d * d
    counts = np.bincount(flat, minlength=size)
    rgb = np.empty((size, 3))
    dirs = np.empty((size, 3))
    for c in range(3):
        rgb[:, c] = np.bincount(flat, weights=values[..., c][valid], minlength=size)
        dirs[:, c] = np.bincount(flat, weights=directions[..., c][valid], minlength=size)
    occ = counts > 0
    denom = np.where(occ, counts, 1)[:, None]
    rgb /= denom
    dirs /= denom
    return ObservationMap(
        rgb.reshape(P, d, d, 3),
        np.asarray(views, dtype=np.float64).reshape(P, 3),
        occ.reshape(P, d, d),
        dirs.reshape(P, d, d, 3),
    )


def build_map(directions, samples, valid, brightness, view, d=32):
    """Build the observation map of a single pixel from its M light samples.

    Raises :class:`DomainError` when no sample is valid.
    """
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise DomainError("no valid samples: pixel cannot be reconstructed")
    m = build_maps(
        np.asarray(directions)[None],
        np.asarray(samples)[None],
        valid[None],
        np.asarray(brightness)[None] if np.ndim(brightness) == 2 else brightness,
        np.asarray(view)[None],
        d,
    )
    return m[0]
