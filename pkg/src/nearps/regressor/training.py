"""Training loop for :class:`CompactNet` with a compact in-memory record bank.

Observation maps are mostly empty, so the bank keeps only the occupied cells
of each map and densifies a batch at a time.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError
from ..obsmap import ObservationMap
from .loss import angular_loss


class TrainingDiverged(DomainError):
    """Raised when epoch losses stay above the initial loss."""


class RecordBank:
    """Sparse storage for observation maps and their target normals."""

    def __init__(self, d, cells, rgb, offsets, views, targets):
        self.d = int(d)
        self.cells = np.asarray(cells, dtype=np.int32)
        self.rgb = np.asarray(rgb, dtype=np.float32)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.views = np.asarray(views, dtype=np.float32)
        self.targets = np.asarray(targets, dtype=np.float32)
        if len(self.offsets) != len(self.targets) + 1 or len(self.views) != len(self.targets):
            raise ValueError("inconsistent record bank arrays")

    def __len__(self):
        return len(self.targets)

    @classmethod
    def from_records(cls, records, d=None):
        cells, rgb, views, targets, offsets = [], [], [], [], [0]
        for r in records:
            if d is None:
                d = r.map.d
            elif r.map.d != d:
                raise ValueError("all records must share d")
            occ = r.map.occupancy.ravel()
            idx = np.flatnonzero(occ)
            cells.append(idx)
            rgb.append(r.map.rgb.reshape(-1, 3)[idx])
            views.append(r.map.view_vector)
            targets.append(r.target)
            offsets.append(offsets[-1] + len(idx))
        if d is None:
            raise ValueError("cannot build a bank from zero records without d")
        cat = lambda parts, shape: np.concatenate(parts) if parts else np.zeros(shape)
        return cls(d, cat(cells, (0,)), cat(rgb, (0, 3)), offsets,
                   np.reshape(views, (-1, 3)), np.reshape(targets, (-1, 3)))

    @classmethod
    def from_maps(cls, maps, targets):
        """Bank from a batched :class:`ObservationMap` or a dense (N, d, d, 6) array."""
        if isinstance(maps, ObservationMap):
            occ = maps.occupancy.reshape(len(maps), -1)
            rgb = maps.rgb.reshape(len(maps), -1, 3)
            views = maps.view_vector
        else:
            maps = np.asarray(maps)
            rgb = maps[..., :3].reshape(len(maps), -1, 3)
            occ = np.any(rgb != 0, axis=-1)
            views = maps[:, 0, 0, 3:]
        rows, idx = np.nonzero(occ)
        offsets = np.concatenate([[0], np.cumsum(occ.sum(axis=1))])
        return cls(int(np.sqrt(occ.shape[1])), idx, rgb[rows, idx], offsets, views, targets)

    def subset(self, index):
        index = np.asarray(index)
        lens = np.diff(self.offsets)[index]
        pos = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in index]) \
            if len(index) else np.zeros(0, dtype=np.int64)
        return RecordBank(self.d, self.cells[pos], self.rgb[pos], np.concatenate([[0], np.cumsum(lens)]),
                          self.views[index], self.targets[index])

    def dense(self, index):
        """Dense (B, d, d, 6) float32 maps for records ``index``."""
        index = np.asarray(index)
        d2 = self.d * self.d
        x = np.zeros((len(index), d2, 6), dtype=np.float32)
        x[:, :, 3:] = self.views[index][:, None, :]
        starts, stops = self.offsets[index], self.offsets[index + 1]
        lens = stops - starts
        rows = np.repeat(np.arange(len(index)), lens)
        pos = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
        x[rows, self.cells[pos], :3] = self.rgb[pos]
        return x.reshape(len(index), self.d, self.d, 6)

    def batches(self, batch_size):
        for i in range(0, len(self), batch_size):
            idx = np.arange(i, min(i + batch_size, len(self)))
            yield self.dense(idx), self.targets[idx]

    @classmethod
    def concatenate(cls, banks):
        banks = list(banks)
        if not banks:
            raise ValueError("nothing to concatenate")
        d = banks[0].d
        if any(b.d != d for b in banks):
            raise ValueError("all banks must share d")
        sizes = [b.offsets[-1] for b in banks]
        shifts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        offsets = np.concatenate([[0]] + [b.offsets[1:] + s for b, s in zip(banks, shifts)])
        return cls(d, np.concatenate([b.cells for b in banks]), np.concatenate([b.rgb for b in banks]),
                   offsets, np.concatenate([b.views for b in banks]),
                   np.concatenate([b.targets for b in banks]))


def bank_from_stream(stream, count, chunk=10000):
    """Draw ``count`` records from an iterator of training records into a bank."""
    stream = iter(stream)
    parts = []
    for start in range(0, count, chunk):
        n = min(chunk, count - start)
        parts.append(RecordBank.from_records(next(stream) for _ in range(n)))
    return RecordBank.concatenate(parts)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    net: object
    loss_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    lr_curve: list = field(default_factory=list)
    initial_loss: float = float("nan")
    seconds: float = 0.0


def evaluate_mae(net, bank, batch_size=1024):
    """Mean angular error in degrees of ``net`` over a record bank."""
    total = 0.0
    for x, t in bank.batches(batch_size):
        total += angular_loss(net.predict_batch(x), t).sum()
    return float(np.degrees(total / max(len(bank), 1)))


def train(net, bank, steps, batch_size=256, *, seed=0, lr=1e-3, steps_per_epoch=None,
          val_bank=None, patience=2, decay=0.5, min_lr=1e-5, divergence_epochs=3,
          restore_best=True, log=None):
    """Train ``net`` in place on records drawn from ``bank``.

    Batches are drawn from a fresh permutation of the bank each pass, seeded
    by ``seed``. Every ``steps_per_epoch`` steps the average training loss is
    recorded, the learning rate is halved when the monitored loss (validation
    MAE if ``val_bank`` is given) has not improved for ``patience`` epochs, and
    training aborts with :class:`TrainingDiverged` if the epoch loss exceeds
    the initial loss ``divergence_epochs`` times in a row.
    """
    if len(bank) == 0:
        raise ValueError("empty training bank")
    if bank.d != net.d:
        raise ValueError(f"bank d={bank.d} does not match network d={net.d}")
    batch_size = min(batch_size, len(bank))
    if steps_per_epoch is None:
        steps_per_epoch = max(1, len(bank) // batch_size)
    rng = np.random.default_rng(seed)
    opt = Adam(net.params, lr=lr)
    start = time.perf_counter()

    probe = np.arange(min(len(bank), 1024))
    initial = float(angular_loss(net.forward(bank.dense(probe)), bank.targets[probe]).mean())
    result = TrainResult(net, initial_loss=initial)
    net.train_config = {"batch_size": int(batch_size), "steps": int(steps), "lr": float(lr),
                        "seed": int(seed), "steps_per_epoch": int(steps_per_epoch),
                        "records": int(len(bank))}

    order = np.zeros(0, dtype=np.int64)
    best, best_params, stale, above = np.inf, None, 0, 0
    epoch_losses = []
    for step in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(len(bank))])
        idx, order = order[:batch_size], order[batch_size:]
        loss, grads = net.loss_and_grads(bank.dense(idx), bank.targets[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.step(net.params, grads)
        epoch_losses.append(loss)

        if len(epoch_losses) == steps_per_epoch or step == steps - 1:
            avg = float(np.mean(epoch_losses))
            epoch_losses = []
            result.loss_curve.append(avg)
            result.lr_curve.append(opt.lr)
            monitor = avg
            if val_bank is not None:
                monitor = evaluate_mae(net, val_bank)
                result.val_curve.append(monitor)
            if log is not None:
                val = f" val_mae_deg={monitor:.3f}" if val_bank is not None else ""
                log(f"epoch {len(result.loss_curve)} step {step + 1} loss_deg={np.degrees(avg):.3f}"
                    f"{val} lr={opt.lr:.2e}")
            above = above + 1 if avg > initial else 0
            if above >= divergence_epochs:
                raise TrainingDiverged(
                    f"epoch loss above initial {np.degrees(initial):.2f} deg for {above} epochs; "
                    f"curve (deg): {[round(float(np.degrees(v)), 2) for v in result.loss_curve]}")
            if monitor < best:
                best, stale = monitor, 0
                if restore_best:
                    best_params = [p.copy() for p in net.params]
            else:
                stale += 1
                if stale >= patience:
                    opt.lr = max(opt.lr * decay, min_lr)
                    stale = 0
    if restore_best and best_params is not None:
        net.params = best_params
    result.seconds = time.perf_counter() - start
    return result
