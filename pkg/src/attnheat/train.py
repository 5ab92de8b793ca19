"""SGD-with-momentum training, evaluation, metrics CSV and checkpoints."""

from __future__ import annotations

import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .data import CIFAR10_MEAN, CIFAR10_STD, Cifar10Dataset, augment, batches, preprocess
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .net import Network
from .rng import Rng
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_loss,train_acc,test_loss,test_acc,wall_seconds"
CHECKPOINT_MAGIC = b"AHCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    flip: bool = True
    pad_crop: int = 4
    subset_size: Optional[int] = None
    stage: Optional[str] = None
    mask_mode: str = "multiply"
    eval_batch_size: int = 250

    def validate(self, allow_zero_lr: bool = False) -> None:
        # lr == 0 is only useful as a frozen-optimizer probe
        if not (self.lr > 0 or (allow_zero_lr and self.lr == 0)):
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0 or self.pad_crop < 0 or self.weight_decay < 0:
            raise ConfigError("epochs, pad_crop and weight_decay must be non-negative")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    wall_seconds: float

    def csv_line(self, with_time: bool = True) -> str:
        wall = self.wall_seconds if with_time else 0.0
        return (f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},"
                f"{self.test_loss:.6f},{self.test_acc:.6f},{wall:.6f}")


def write_metrics_csv(rows, path, with_time: bool = True) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(r.csv_line(with_time) + "\n")


def read_metrics_csv(path) -> list:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise FormatError(f"{path}: missing metrics header")
    rows = []
    for line in lines[1:]:
        e, *vals = line.split(",")
        rows.append(MetricsRow(int(e), *(float(v) for v in vals)))
    return rows


# optimizer -----------------------------------------------------------------

@dataclass
class SGDMomentum:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def step(self, params: dict) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p.data)
            sgd_momentum_step(p.data, p.grad, v, self.lr, self.momentum, self.weight_decay)


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float, weight_decay: float) -> None:
    """In place: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ShapeError(f"sgd step: param {param.shape}, grad {grad.shape}, "
                         f"velocity {velocity.shape} disagree")
    dt = param.dtype.type
    velocity *= dt(momentum)
    velocity += grad
    if weight_decay:
        velocity += dt(weight_decay) * param
    param -= dt(lr) * velocity


# evaluation ----------------------------------------------------------------

def predict(net: Network, ds: Cifar10Dataset, batch_size: int = 250,
            mean=CIFAR10_MEAN, std=CIFAR10_STD) -> tuple:
    """Logits and argmax predictions (ties -> lowest class index)."""
    outs = []
    with no_grad():
        for idx in batches(len(ds), batch_size):
            logits, _ = net.forward(preprocess(ds.images[idx], mean, std))
            outs.append(logits.data)
    logits = np.concatenate(outs) if outs else np.zeros((0, net.spec.num_classes), np.float32)
    return logits, np.argmax(logits, axis=1)


def evaluate(net: Network, ds: Cifar10Dataset, batch_size: int = 250,
             mean=CIFAR10_MEAN, std=CIFAR10_STD) -> tuple:
    """(mean cross-entropy, accuracy) with no augmentation."""
    if len(ds) == 0:
        return 0.0, 0.0
    total, correct = 0.0, 0
    with no_grad():
        for idx in batches(len(ds), batch_size):
            logits, _ = net.forward(preprocess(ds.images[idx], mean, std))
            loss = ops.softmax_cross_entropy(logits, ds.labels[idx])
            total += float(loss.data) * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == ds.labels[idx]).sum())
    return total / len(ds), correct / len(ds)


# training ------------------------------------------------------------------

def train(net: Network, train_set: Cifar10Dataset, test_set: Cifar10Dataset,
          cfg: TrainConfig, mean=CIFAR10_MEAN, std=CIFAR10_STD,
          checkpoint_path=None) -> list:
    cfg.validate(allow_zero_lr=True)
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    train_set = train_set.subset(cfg.subset_size)
    rng = Rng(cfg.seed)
    opt = SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        loss_sum, correct = 0.0, 0
        for b, idx in enumerate(batches(len(train_set), cfg.batch_size, order)):
            imgs = augment(train_set.images[idx], cfg.flip, cfg.pad_crop, rng)
            labels = train_set.labels[idx]
            for p in net.parameters():
                p.grad = None
            logits, _ = net.forward(preprocess(imgs, mean, std))
            loss = ops.softmax_cross_entropy(logits, labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            backward(loss)
            opt.step(net.params)
            loss_sum += value * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        test_loss, test_acc = evaluate(net, test_set, cfg.eval_batch_size, mean, std)
        row = MetricsRow(epoch, loss_sum / len(train_set), correct / len(train_set),
                         test_loss, test_acc, time.perf_counter() - t0)
        log.info("epoch %d train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f (%.1fs)",
                 row.epoch, row.train_loss, row.train_acc, row.test_loss, row.test_acc,
                 row.wall_seconds)
        rows.append(row)
    if checkpoint_path is not None:
        save_checkpoint(net.params, checkpoint_path)
    return rows


# checkpoints -----------------------------------------------------------------
#
# little-endian layout:
#   b"AHCK" | u32 version | u32 count
#   count x { u16 name_len | name (utf-8) | u8 ndim | ndim x u32 dims |
#             prod(dims) x f32 values (row-major) }

def checkpoint_bytes(params: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(params)))
    for name, p in params.items():
        raw = name.encode("utf-8")
        data = np.asarray(p.data if hasattr(p, "data") else p, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    return buf.getvalue()


def save_checkpoint(params: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(raw):
                raise FormatError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def apply_checkpoint(net: Network, state: dict) -> None:
    """Copy checkpoint arrays into ``net``; raises on the first mismatch."""
    for name, p in net.params.items():
        if name not in state:
            raise ShapeError(f"parameter {name!r} missing from checkpoint")
        if state[name].shape != p.shape:
            raise ShapeError(f"parameter {name!r}: checkpoint shape {state[name].shape} "
                             f"!= model shape {p.shape}")
    extra = set(state) - set(net.params)
    if extra:
        raise ShapeError(f"checkpoint has unknown parameter {sorted(extra)[0]!r}")
    for name, p in net.params.items():
        p.data[...] = state[name]
