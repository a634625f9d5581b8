"""Closed-form Lambertian baseline: least squares on gray observation-map samples."""
import numpy as np

from ..errors import DomainError
from ..geometry import orient_towards_camera
from ..obsmap import cell_center_directions

SHADOW_FRACTION = 0.02
HIGHLIGHT_FRACTION = 0.10
MIN_FOR_HIGHLIGHT_REJECTION = 6
RANK_TOL = 1e-8


def _directions(maps):
    if maps.light_dirs is not None:
        return maps.light_dirs
    return np.broadcast_to(cell_center_directions(maps.d), maps.rgb.shape)


def lambertian_solve_batch(maps):
    """Solve a batch of maps.

    Returns ``(normals (P, 3), albedo (P, 3), ok (P,))``. Rows with
    ``ok == False`` (fewer than three usable, non-coplanar samples) hold NaN.
    Normals are not re-oriented.
    """
    P = maps.batch_shape[0]
    K = maps.d * maps.d
    rgb = maps.rgb.reshape(P, K, 3)
    L = np.asarray(_directions(maps), dtype=np.float64).reshape(P, K, 3)
    occ = maps.occupancy.reshape(P, K)
    gray = rgb.mean(axis=-1)

    peak = np.where(occ, gray, -np.inf).max(axis=1, initial=-np.inf)
    keep = occ & (gray >= SHADOW_FRACTION * peak[:, None]) & (gray > 0)
    k = keep.sum(axis=1)
    n_drop = np.where(k > MIN_FOR_HIGHLIGHT_REJECTION, np.floor(HIGHLIGHT_FRACTION * k), 0)
    if np.any(n_drop > 0):
        order = np.argsort(np.where(keep, -gray, np.inf), axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(K)[None, :], axis=1)
        keep &= rank >= n_drop[:, None]

    w = keep.astype(np.float64)
    A = np.einsum("pk,pki,pkj->pij", w, L, L)
    b = np.einsum("pk,pk,pki->pi", w, gray, L)
    eig = np.linalg.eigvalsh(A)
    ok = (keep.sum(axis=1) >= 3) & (eig[:, 0] > RANK_TOL * np.maximum(eig[:, -1], 1e-300))
    A_safe = np.where(ok[:, None, None], A, np.eye(3))
    x = np.linalg.solve(A_safe, b[..., None])[..., 0]
    norm = np.linalg.norm(x, axis=-1)
    ok &= norm > 0
    normals = x / np.where(ok, norm, 1.0)[:, None]

    shading = np.einsum("pki,pi->pk", L, normals)
    num = np.einsum("pk,pkc,pk->pc", w, rgb, shading)
    den = np.einsum("pk,pk->p", w, shading**2)
    albedo = num / np.where(den > 0, den, 1.0)[:, None]
    normals[~ok] = np.nan
    albedo[~ok] = np.nan
    return normals, albedo, ok


def lambertian_solve(obs):
    """Lambertian normal and RGB albedo of a single observation map.

    Shadowed samples (gray < 2% of the brightest) are dropped and, when more
    than six remain, so is the brightest 10% (highlights). Raises
    :class:`DomainError` when the remaining light directions are degenerate.
    """
    if obs.batch_shape:
        raise ValueError("expected a single map; use lambertian_solve_batch for batches")
    dirs = None if obs.light_dirs is None else obs.light_dirs[None]
    batch = type(obs)(obs.rgb[None], obs.view_vector[None], obs.occupancy[None], dirs)
    normals, albedo, ok = lambertian_solve_batch(batch)
    if not ok[0]:
        raise DomainError("degenerate lighting: fewer than three independent light directions")
    return normals[0], albedo[0]


class LambertianRegressor:
    """Regressor wrapper: oriented unit normals, falling back to the viewing
    vector (fronto-facing) for pixels the least-squares system cannot solve."""

    name = "lambertian"

    def predict_batch(self, maps):
        normals, _, ok = lambertian_solve_batch(maps)
        normals = np.where(ok[:, None], normals, maps.view_vector)
        return orient_towards_camera(normals)
