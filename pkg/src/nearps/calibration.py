"""Light calibration from images of a diffuse reference plane.

Each LED is described by position ``P``, RGB brightness ``phi``, principal
direction ``D`` and angular exponent ``mu``. The plane (known albedo ``rho``,
known pose) is imaged under every light, possibly at several distances, and
the parameters are refined by minimising a smoothed L1 photometric loss of::

    i_m = phi_m * rho * (s.D_m)^mu_m / |P_m - X|^2 * max(0, L_m . N)
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import CameraIntrinsics
from .lighting import LightSet

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class CalibrationFile:
    camera: CameraIntrinsics
    lights: LightSet
    version: int = FORMAT_VERSION

    def to_dict(self):
        cam = self.camera
        return {
            "version": self.version,
            "camera": {"fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx),
                       "cy": float(cam.cy), "width": int(cam.width), "height": int(cam.height)},
            "lights": [
                {"position": [float(x) for x in l.position],
                 "phi": [float(x) for x in l.brightness],
                 "direction": [float(x) for x in l.direction],
                 "mu": float(l.mu)}
                for l in self.lights
            ],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            version = int(data["version"])
            if version != FORMAT_VERSION:
                raise DomainError(f"unsupported calibration version {version}")
            c = data["camera"]
            cam = CameraIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                   int(c["width"]), int(c["height"]))
            lights = data["lights"]
            if not lights:
                raise DomainError("calibration contains no lights")
            ls = LightSet([l["position"] for l in lights], [l["phi"] for l in lights],
                          [l["direction"] for l in lights], [l["mu"] for l in lights])
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed calibration: missing or invalid field {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"malformed calibration: {exc}") from exc
        return cls(cam, ls, version)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DomainError(f"unparseable calibration file: {exc}") from exc
        return cls.from_dict(data)


SATURATION = 0.98
ALBEDO = 0.5
HUBER_DELTA = 1e-4


@dataclass(frozen=True, eq=False)
class PlanePose:
    """A captured plane: surface points ``X`` (K, 3), unit normal ``normal`` (3,)
    facing the camera, and the observed images ``observed`` (M, K, 3)."""

    X: np.ndarray
    normal: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normal, dtype=np.float64)
        obs = np.asarray(self.observed, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be a unit vector")
        if obs.ndim != 3 or obs.shape[1:] != (len(X), 3):
            raise ValueError(f"observed must have shape (M, {len(X)}, 3), got {obs.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "observed", obs)


def plane_points(cam, point, normal, stride=1):
    """Pixels ``(u, v)`` and surface points of the plane through ``point`` with ``normal``.

    Returns ``(u, v, X)`` for every ``stride``-th pixel whose ray hits the plane
    in front of the camera.
    """
    normal = np.asarray(normal, dtype=np.float64)
    u, v = cam.pixel_grid()
    u, v = u[::stride, ::stride].ravel(), v[::stride, ::stride].ravel()
    r = cam.rays(u, v)
    denom = r @ normal
    t = np.where(np.abs(denom) > 1e-12, (np.asarray(point) @ normal) / np.where(denom == 0, 1, denom), -1)
    hit = t > 0
    return u[hit], v[hit], r[hit] * t[hit, None]


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    camera: CameraIntrinsics
    poses: tuple
    init: LightSet
    albedo: float = ALBEDO

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise ValueError("at least one plane pose is required")
        for p in poses:
            if p.observed.shape[0] != len(self.init):
                raise ValueError("every pose needs one image per light")
        object.__setattr__(self, "poses", poses)


def _geometry(P, D, mu, X, N):
    """Per-light geometric term h = (s.D)^mu * max(0, L.N) / dist^2 and its derivatives.

    ``P``, ``D`` (M, 3); ``mu`` (M,); ``X`` (K, 3); ``N`` (3,). Returns
    ``h`` (M, K) and derivatives wrt P (M, K, 3), D (M, K, 3), mu (M, K).
    """
    v = P[:, None, :] - X[None]
    dist = np.linalg.norm(v, axis=-1)
    vn = v @ N
    c = -np.einsum("mki,mi->mk", v, D) / dist
    on = (c > 0) & (vn > 0)
    c_safe = np.where(on, c, 1.0)
    m = mu[:, None]
    cm = c_safe**m
    h = np.where(on, cm * vn / dist**3, 0.0)

    dc_dv = -D[:, None, :] / dist[..., None] - (c / dist**2)[..., None] * v
    dh_dv = ((m * c_safe ** (m - 1.0) * vn / dist**3)[..., None] * dc_dv
             + (cm / dist**3)[..., None] * N
             - (3.0 * cm * vn / dist**5)[..., None] * v)
    dh_dD = (m * c_safe ** (m - 1.0) * vn / dist**4)[..., None] * (-v)
    dh_dmu = cm * np.log(c_safe) * vn / dist**3
    z = ~on
    dh_dv[z] = 0.0
    dh_dD[z] = 0.0
    dh_dmu = np.where(on, dh_dmu, 0.0)
    return h, dh_dv, dh_dD, dh_dmu


def calib_residuals(lights, problem, jacobian=False):
    """Predicted minus observed intensity for every pose, light, pixel and channel.

    Saturated observations contribute a zero residual. Returns a list with
    one (M, K, 3) array per pose; with ``jacobian`` each entry is
    ``(r, valid, dP, dphi, dD, dmu)`` where, for light m, pixel k, channel c,
    ``dP[m, k, c]`` and ``dD[m, k, c]`` are gradients wrt the 3-vectors,
    ``dphi[m, k, c]`` is the derivative wrt ``phi[m, c]`` and ``dmu[m, k, c]``
    wrt ``mu[m]``.
    """
    P, phi, D, mu = lights.positions, lights.brightness, lights.directions, lights.mu
    rho = problem.albedo
    out = []
    for pose in problem.poses:
        h, dh_dv, dh_dD, dh_dmu = _geometry(P, D, mu, pose.X, pose.normal)
        valid = pose.observed < SATURATION
        pred = rho * phi[:, None, :] * h[..., None]
        r = np.where(valid, pred - pose.observed, 0.0)
        if not jacobian:
            out.append(r)
            continue
        scale = np.where(valid, rho * phi[:, None, :], 0.0)
        dP = scale[..., None] * dh_dv[:, :, None, :]
        dD = scale[..., None] * dh_dD[:, :, None, :]
        dmu = scale * dh_dmu[..., None]
        dphi = np.where(valid, rho * h[..., None], 0.0)
        out.append((r, valid, dP, dphi, dD, dmu))
    return out


def _huber_grad(r):
    return np.clip(r / HUBER_DELTA, -1.0, 1.0)


def _huber(r):
    a = np.abs(r)
    return np.where(a <= HUBER_DELTA, 0.5 * r * r / HUBER_DELTA, a - 0.5 * HUBER_DELTA)


def calibration_loss(lights, problem):
    """Mean absolute residual over all valid observations."""
    total, count = 0.0, 0
    for r, pose in zip(calib_residuals(lights, problem), problem.poses):
        total += np.abs(r).sum()
        count += int((pose.observed < SATURATION).sum())
    return total / max(count, 1)


def _loss_and_grads(lights, problem):
    """Mean Huber loss and gradients wrt (P, log phi, D, mu)."""
    M = len(lights)
    gP, gphi, gD, gmu = np.zeros((M, 3)), np.zeros((M, 3)), np.zeros((M, 3)), np.zeros(M)
    loss, l1, count = 0.0, 0.0, 0
    for r, valid, dP, dphi, dD, dmu in calib_residuals(lights, problem, jacobian=True):
        w = np.where(valid, _huber_grad(r), 0.0)
        loss += np.where(valid, _huber(r), 0.0).sum()
        l1 += np.abs(r).sum()
        count += int(valid.sum())
        gP += np.einsum("mkc,mkci->mi", w, dP)
        gD += np.einsum("mkc,mkci->mi", w, dD)
        gmu += np.einsum("mkc,mkc->m", w, dmu)
        gphi += np.einsum("mkc,mkc->mc", w, dphi)
    n = max(count, 1)
    # chain rule for the log-brightness parameterisation
    gphi = gphi * lights.brightness
    return loss / n, l1 / n, (gP / n, gphi / n, gD / n, gmu / n)


@dataclass
class CalibrationResult:
    calibration: CalibrationFile
    loss_history: list = field(default_factory=list)
    l1_history: list = field(default_factory=list)


def jacobian_conditioning(lights, problem):
    """Per-light ratio of smallest to largest singular value of the residual
    Jacobian wrt (P, mu, log phi), with columns scaled to unit norm.

    Small values flag nearly flat loss directions; with a single plane pose
    the light distance and brightness trade off against each other. Directions
    are left out because their unit-norm constraint removes a degree of freedom.
    """
    out = []
    per_pose = calib_residuals(lights, problem, jacobian=True)
    for m in range(len(lights)):
        rows = []
        for r, valid, dP, dphi, dD, dmu in per_pose:
            v = valid[m]
            J = np.concatenate([dP[m][v], dmu[m][v][:, None]], axis=1)
            # brightness: one column per channel, nonzero only on that channel's rows
            chan = np.nonzero(v)[1]
            Jphi = np.zeros((len(chan), 3))
            Jphi[np.arange(len(chan)), chan] = dphi[m][v] * lights.brightness[m][chan]
            rows.append(np.concatenate([J, Jphi], axis=1))
        J = np.concatenate(rows)
        norms = np.linalg.norm(J, axis=0)
        if J.shape[0] < J.shape[1] or np.any(norms == 0):
            out.append(0.0)
            continue
        s = np.linalg.svd(J / norms, compute_uv=False)
        out.append(float(s[-1] / s[0]))
    return np.array(out)


def calibrate(problem, epochs=2000, lr=None, decay=1e-2, divergence_factor=10.0):
    """Refine light parameters by gradient descent on a smoothed L1 loss.

    Parameters
    ----------
    problem : CalibrationProblem
    epochs : int
        Full-batch steps.
    lr : dict, optional
        Per-group Adam step sizes for ``position`` (m), ``log_phi``,
        ``direction`` and ``mu``.
    decay : float
        The step sizes decay geometrically to this fraction by the last epoch.
    divergence_factor : float
        Abort when a proposed step pushes the L1 loss above this multiple of
        the initial loss (plus 1e-3, so an exact start cannot trip it).

    Returns
    -------
    CalibrationResult
    """
    if len(problem.poses) < 2:
        warnings.warn("a single plane pose leaves light distance and brightness "
                      "nearly interchangeable; capture the plane at two or more distances",
                      stacklevel=2)
    steps = {"position": 2e-4, "log_phi": 2e-3, "direction": 2e-3, "mu": 5e-3}
    if lr:
        steps.update(lr)
    lights = problem.init
    params = [lights.positions.copy(), np.log(lights.brightness), lights.directions.copy(),
              lights.mu.copy()]
    rates = [steps["position"], steps["log_phi"], steps["direction"], steps["mu"]]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-12
    gamma = decay ** (1.0 / max(epochs, 1))
    result = CalibrationResult(None)

    def as_lights(ps):
        return LightSet(ps[0], np.exp(ps[1]), ps[2], ps[3])

    # Steps that raise the loss are rejected and the trust factor halved, so
    # the recorded loss never increases (an exact start stays put).
    current = as_lights(params)
    loss, l1, grads = _loss_and_grads(current, problem)
    if not np.isfinite(loss):
        raise DomainError("calibration loss is not finite at the initial parameters")
    result.loss_history.append(loss)
    result.l1_history.append(l1)
    trust = 1.0
    for t in range(1, epochs + 1):
        scale = trust * gamma ** (t - 1)
        cand = []
        for i, g in enumerate(grads):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            cand.append(params[i] - rates[i] * scale * mhat / (np.sqrt(vhat) + eps))
        cand[2] = cand[2] / np.linalg.norm(cand[2], axis=1, keepdims=True)
        cand[3] = np.maximum(cand[3], 0.0)
        c_lights = as_lights(cand)
        c_loss, c_l1, c_grads = _loss_and_grads(c_lights, problem)
        if not np.isfinite(c_loss) or c_l1 > divergence_factor * result.l1_history[0] + 1e-3:
            raise DomainError(f"calibration diverged at epoch {t}: L1 history "
                              f"{[round(x, 6) for x in result.l1_history[-5:]] + [c_l1]}")
        if c_loss <= loss:
            params, current, loss, l1, grads = cand, c_lights, c_loss, c_l1, c_grads
            trust = min(1.0, trust * 1.25)
        else:
            trust *= 0.5
        result.loss_history.append(loss)
        result.l1_history.append(l1)

    final = current
    result.calibration = CalibrationFile(problem.camera, final)
    return result
