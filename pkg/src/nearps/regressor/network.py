"""Compact convolutional normal regressor implemented directly in numpy.

Layout is NHWC. The network is a stack of ``3x3 conv -> ReLU -> 2x2 max-pool``
stages followed by two dense layers and an L2 normalisation, so the output is
always a unit vector. Before the first layer the RGB channels of each map are
divided by their maximum, which makes predictions invariant to the overall
brightness of the samples.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..geometry import orient_towards_camera
from .loss import angular_loss, angular_loss_grad

CHECKPOINT_MAGIC = b"NPSNET\x00\x01"
CHECKPOINT_VERSION = 1


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution. x: (N, H, W, C), w: (9*C, F), b: (F,)."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + wd, :] for i in range(3) for j in range(3)], axis=-1)
    cols = cols.reshape(n * h * wd, 9 * c)
    out = cols @ w + b
    return out.reshape(n, h, wd, -1), cols


def conv3x3_backward(dout, cols, w, x_shape, need_dx=True):
    n, h, wd, c = x_shape
    f = dout.shape[-1]
    d2 = dout.reshape(-1, f)
    dw = cols.T @ d2
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.T).reshape(n, h, wd, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :], dw, db


def maxpool2_forward(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    blocks = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def normalize_input(x):
    """Scale the RGB channels of each map by their maximum; view channels untouched."""
    rgb = x[..., :3]
    peak = rgb.reshape(len(x), -1).max(axis=1)
    scale = 1.0 / np.where(peak > 0, peak, 1.0)
    return np.concatenate([rgb * scale[:, None, None, None].astype(x.dtype), x[..., 3:]], axis=-1)


@dataclass(frozen=True)
class Architecture:
    d: int = 32
    channels: tuple = (16, 32, 64, 64)
    hidden: int = 128

    def __post_init__(self):
        if self.d % (2 ** len(self.channels)) != 0:
            raise ValueError(f"d={self.d} is not divisible by 2**{len(self.channels)}")

    def param_shapes(self):
        shapes = []
        c_in = 6
        for c_out in self.channels:
            shapes += [(9 * c_in, c_out), (c_out,)]
            c_in = c_out
        side = self.d // (2 ** len(self.channels))
        flat = side * side * c_in
        shapes += [(flat, self.hidden), (self.hidden,), (self.hidden, 3), (3,)]
        return shapes


class CompactNet:
    """Per-pixel normal regressor on d x d x 6 observation maps."""

    def __init__(self, arch=None, seed=0, dtype=np.float32, params=None):
        self.arch = arch or Architecture()
        self.dtype = np.dtype(dtype)
        if params is None:
            params = self._init_params(seed)
        self.params = [np.asarray(p, dtype=self.dtype) for p in params]
        self.train_config = {}

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        params = []
        for shape in self.arch.param_shapes():
            if len(shape) == 2:
                params.append(rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape))
            else:
                params.append(np.zeros(shape))
        return params

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    @property
    def d(self):
        return self.arch.d

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != (self.d, self.d, 6):
            raise ValueError(f"expected maps of shape (N, {self.d}, {self.d}, 6), got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, cache=False):
        """Unit-norm predictions (N, 3); with ``cache`` also the backward tape."""
        x = normalize_input(self._check_input(x))
        tape = []
        h = x
        n_conv = len(self.arch.channels)
        for i in range(n_conv):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            z, cols = conv3x3_forward(h, w, b)
            a = np.maximum(z, 0)
            p, idx = maxpool2_forward(a)
            tape.append((h.shape, cols, z > 0, idx, a.shape))
            h = p
        pooled_shape = h.shape
        flat = h.reshape(len(h), -1)
        w1, b1, w2, b2 = self.params[2 * n_conv:]
        z1 = flat @ w1 + b1
        a1 = np.maximum(z1, 0)
        out = a1 @ w2 + b2
        norm = np.sqrt(np.sum(out * out, axis=1, keepdims=True))
        # a vanishing head output (e.g. an empty map) maps to the fronto-facing normal
        live = norm > np.finfo(self.dtype).tiny
        norm = np.where(live, norm, 1.0)
        y = np.where(live, out / norm, np.array([0.0, 0.0, -1.0], dtype=self.dtype))
        if not cache:
            return y
        # dead rows carry no gradient: an infinite norm zeroes their backward pass
        return y, (tape, pooled_shape, flat, z1, a1, y, np.where(live, norm, np.inf))

    def backward(self, dy, tape):
        """Parameter gradients given ``dL/dy`` for the cached forward pass."""
        conv_tape, pooled_shape, flat, z1, a1, y, norm = tape
        n_conv = len(self.arch.channels)
        w1, _, w2, _ = self.params[2 * n_conv:]
        dout = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norm
        grads = [None] * len(self.params)
        grads[-2] = a1.T @ dout
        grads[-1] = dout.sum(axis=0)
        da1 = dout @ w2.T
        dz1 = da1 * (z1 > 0)
        grads[-4] = flat.T @ dz1
        grads[-3] = dz1.sum(axis=0)
        dh = (dz1 @ w1.T).reshape(pooled_shape)
        for i in reversed(range(n_conv)):
            x_shape, cols, active, idx, a_shape = conv_tape[i]
            da = maxpool2_backward(dh, idx, a_shape)
            dz = da * active
            dh, dw, db = conv3x3_backward(dz, cols, self.params[2 * i], x_shape, need_dx=i > 0)
            grads[2 * i], grads[2 * i + 1] = dw, db
        return grads

    def loss_and_grads(self, x, targets):
        """Mean angular loss (radians) over the batch and its parameter gradients."""
        y, tape = self.forward(x, cache=True)
        t = np.asarray(targets, dtype=self.dtype)
        loss = angular_loss(y, t)
        dy = angular_loss_grad(y, t).astype(self.dtype) / len(y)
        return float(loss.mean()), self.backward(dy, tape)

    def predict_batch(self, maps, batch_size=1024):
        """Unit normals for a batch of maps (ObservationMap batch or (N, d, d, 6) array)."""
        x = maps.as_array(self.dtype) if hasattr(maps, "as_array") else np.asarray(maps)
        x = self._check_input(x)
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        y = np.concatenate(out) if out else np.zeros((0, 3), dtype=self.dtype)
        return orient_towards_camera(y.astype(np.float64))

    def copy(self):
        net = CompactNet(self.arch, dtype=self.dtype, params=[p.copy() for p in self.params])
        net.train_config = dict(self.train_config)
        return net


def save_checkpoint(net, path):
    """Write magic, version, architecture JSON, float32 weights and training config JSON."""
    arch = json.dumps({"d": net.arch.d, "channels": list(net.arch.channels),
                       "hidden": net.arch.hidden}, sort_keys=True).encode()
    config = json.dumps(net.train_config, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arch)))
        f.write(arch)
        f.write(struct.pack("<I", len(net.params)))
        for p in net.params:
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(config)))
        f.write(config)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a network checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, n = struct.unpack_from("<II", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    a = json.loads(raw[off:off + n])
    off += n
    arch = Architecture(a["d"], tuple(a["channels"]), a["hidden"])
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        params.append(np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32))
        off += 4 * size
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    net = CompactNet(arch, params=params)
    net.train_config = json.loads(raw[off:off + n])
    return net
