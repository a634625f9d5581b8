"""Depth from normals by robust (l1) integration of log-depth gradients.

Under perspective projection the gradient of ``w = log z`` with respect to
pixel coordinates is a rational function of the normal, which makes the
integration linear in ``w``. The solver minimises

    sum |D w - g|_1 + lam * sum (w - w0)^2

with forward differences between horizontally or vertically adjacent mask
pixels (natural Neumann boundary) and an alternating-multiplier scheme whose
linear step is a screened Poisson system.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import DepthMap

GRAZING_EPS = 1e-6


@dataclass(frozen=True)
class IntegratorConfig:
    lam: float = 1e-6
    admm_penalty: float = 1.0
    max_iters: int = 300
    tol: float = 1e-6

    def __post_init__(self):
        for name in ("lam", "admm_penalty", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True, eq=False)
class GradientField:
    """Per-pixel log-depth gradient ``(p, q) = (dw/du, dw/dv)`` on ``mask``."""

    p: np.ndarray
    q: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        p = np.where(mask, np.asarray(self.p, dtype=np.float64), 0.0)
        q = np.where(mask, np.asarray(self.q, dtype=np.float64), 0.0)
        if p.shape != mask.shape or q.shape != mask.shape:
            raise ValueError("p, q and mask must share a shape")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("gradients must be finite on the mask")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "mask", mask)


@dataclass
class IntegrationResult:
    """``objective`` tracks the returned estimate; ``raw_objective`` the plain
    multiplier-method iterates, which need not decrease monotonically."""

    depth: DepthMap
    objective: list = field(default_factory=list)
    raw_objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def normals_to_gradients(cam, normals):
    """Log-depth gradients implied by a normal map; grazing pixels are masked."""
    n = normals.values
    xbar, ybar = cam.rays()[..., 0], cam.rays()[..., 1]
    denom = xbar * n[..., 0] + ybar * n[..., 1] + n[..., 2]
    mask = normals.mask & (np.abs(denom) >= GRAZING_EPS)
    safe = np.where(mask, denom, 1.0)
    p = -n[..., 0] / (cam.fx * safe)
    q = -n[..., 1] / (cam.fy * safe)
    return GradientField(p, q, mask)


def _difference_operator(mask, grad):
    """Sparse forward differences over mask edges and their target values."""
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(mask.sum())
    heads, tails, target = [], [], []

    hx = mask[:, :-1] & mask[:, 1:]
    a, b = index[:, :-1][hx], index[:, 1:][hx]
    heads.append(b)
    tails.append(a)
    target.append(0.5 * (grad.p[:, :-1][hx] + grad.p[:, 1:][hx]))

    vy = mask[:-1, :] & mask[1:, :]
    a, b = index[:-1, :][vy], index[1:, :][vy]
    heads.append(b)
    tails.append(a)
    target.append(0.5 * (grad.q[:-1, :][vy] + grad.q[1:, :][vy]))

    heads = np.concatenate(heads)
    tails = np.concatenate(tails)
    m = len(heads)
    rows = np.arange(m)
    D = sp.csr_matrix((np.concatenate([np.ones(m), -np.ones(m)]),
                       (np.concatenate([rows, rows]), np.concatenate([heads, tails]))),
                      shape=(m, int(mask.sum())))
    return D, np.concatenate(target), index


def objective(D, g, w, w0, lam):
    return float(np.abs(D @ w - g).sum() + lam * np.sum((w - w0) ** 2))


def _shrink(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def integrate(grad, z0, cfg=IntegratorConfig(), full_output=False):
    """Integrate a log-depth gradient field into a depth map.

    Parameters
    ----------
    grad : GradientField
    z0 : DepthMap
        Prior depth; must be positive wherever ``grad.mask`` is set.
    cfg : IntegratorConfig
    full_output : bool
        Also return the per-iteration objective and convergence flag.

    Returns
    -------
    DepthMap, or IntegrationResult when ``full_output``.
    """
    mask = grad.mask & z0.mask
    if np.any(z0.values[mask] <= 0):
        raise ValueError("prior depth must be positive on the mask")
    w0 = np.log(z0.values[mask])
    result = IntegrationResult(depth=None)
    if w0.size == 0:
        result.depth = DepthMap(np.zeros(mask.shape), mask)
        return result if full_output else result.depth

    D, g, _ = _difference_operator(mask, grad)
    lam, beta = cfg.lam, cfg.admm_penalty
    n = w0.size
    A = (2.0 * lam * sp.identity(n) + beta * (D.T @ D)).tocsc()
    solve = splu(A).solve

    # The reported estimate only moves when the objective improves, so its
    # objective is non-increasing while the multiplier iterates run on.
    w = w0.copy()
    best_w, best_f = w, objective(D, g, w, w0, lam)
    z = D @ w - g
    u = np.zeros_like(g)
    result.objective.append(best_f)
    result.raw_objective.append(best_f)
    for it in range(cfg.max_iters):
        w = solve(2.0 * lam * w0 + beta * (D.T @ (g + z - u)))
        Dw = D @ w
        z_old = z
        z = _shrink(Dw - g + u, 1.0 / beta)
        r = Dw - g - z
        u = u + r
        f = objective(D, g, w, w0, lam)
        result.raw_objective.append(f)
        if f <= best_f:
            best_w, best_f = w, f
        result.objective.append(best_f)
        result.iterations = it + 1
        scale = max(np.linalg.norm(Dw), np.linalg.norm(g), 1e-300)
        primal = np.linalg.norm(r) / scale
        dual = beta * np.linalg.norm(D.T @ (z - z_old)) / scale
        if primal < cfg.tol and dual < cfg.tol:
            result.converged = True
            break

    depth = np.zeros(mask.shape)
    depth[mask] = np.exp(best_w)
    result.depth = DepthMap(depth, mask)
    return result if full_output else result.depth
