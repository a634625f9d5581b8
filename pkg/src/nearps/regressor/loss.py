import numpy as np

# Below this angle the atan2 gradient direction is ill-defined; fall back to 1 - cos.
ALIGNMENT_FALLBACK = np.radians(1.0)


def angular_loss(n_pred, n_true):
    """Angle in radians between predicted and true normals, ``atan2(|t x p|, t . p)``."""
    n_pred = np.asarray(n_pred, dtype=np.float64)
    n_true = np.asarray(n_true, dtype=np.float64)
    cross = np.linalg.norm(np.cross(n_true, n_pred), axis=-1)
    dot = np.sum(n_true * n_pred, axis=-1)
    return np.abs(np.arctan2(cross, dot))


def angular_loss_grad(n_pred, n_true):
    """Gradient of :func:`angular_loss` with respect to ``n_pred``.

    Within ``ALIGNMENT_FALLBACK`` of exact alignment the gradient of
    ``1 - n_true . n_pred`` is returned instead.
    """
    p = np.asarray(n_pred)
    t = np.asarray(n_true, dtype=p.dtype)
    c = np.cross(t, p)
    s = np.linalg.norm(c, axis=-1, keepdims=True)
    d = np.sum(t * p, axis=-1, keepdims=True)
    theta = np.arctan2(s, d)
    safe_s = np.where(s > 0, s, 1.0)
    # d|t x p| / dp = ((t x p) x t) / |t x p|
    ds = np.cross(c, t) / safe_s
    grad = (d * ds - s * t) / (s**2 + d**2)
    return np.where(theta < ALIGNMENT_FALLBACK, -t, grad)
