"""Fold training loop, class-weighted sampling and the ABML checkpoint format."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import TrainConfig, dumps_kv
from ..features import NUM_CLASSES
from .model import (
    PARAM_NAMES,
    AbmilParams,
    backward,
    balanced_ce_loss,
    class_weights,
    forward,
    init_params,
    predict_proba,
)
from .optim import AdamState, DivergenceError, adam_step

log = logging.getLogger(__name__)

PLATEAU_THRESHOLD = 1e-6

ABML_MAGIC = b"ABML"
ABML_VERSION = 1
_ABML_HEADER = struct.Struct("<4sHIIII")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def sampling_weights(labels, n_classes=NUM_CLASSES):
    """Per-slide draw probabilities proportional to 1 / (slides in that class)."""
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    p = 1.0 / counts[labels]
    return p / p.sum()


def _as_pairs(bags):
    return [(np.asarray(f, dtype=np.float64), int(y)) for f, y in bags]


def evaluate_loss(bags, params, weights):
    losses = []
    for feats, label in bags:
        logits, _, _ = forward(feats, params)
        losses.append(balanced_ce_loss(predict_proba(logits), label, weights))
    return float(np.mean(losses))


def train_fold(train_bags, val_bags, config, n_classes=NUM_CLASSES):
    """Train on (features, label) pairs and keep the lowest-validation-loss epoch.

    Returns (best_params, history) where history is a list of EpochRecord.
    """
    train = _as_pairs(train_bags)
    val = _as_pairs(val_bags)
    if not train or not val:
        raise ValueError("train and validation splits must both be non-empty")
    dims = {f.shape[1] for f, _ in train + val}
    if len(dims) != 1:
        raise ValueError(f"bags disagree on feature dim: {sorted(dims)}")
    dim = dims.pop()

    labels = np.array([y for _, y in train])
    weights = class_weights(np.bincount(labels, minlength=n_classes))
    draw_p = sampling_weights(labels, n_classes)

    init_seq, sample_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(dim, config.model_size, n_classes, np.random.default_rng(init_seq))
    sample_rng = np.random.default_rng(sample_seq)
    drop_rng = np.random.default_rng(drop_seq)
    state = AdamState.zeros(params)

    lr = config.learning_rate
    plateau_best = np.inf
    bad_epochs = 0
    best_loss = np.inf
    best_params = params.copy()
    history = []

    for epoch in range(1, config.max_epochs + 1):
        order = sample_rng.choice(len(train), size=len(train), replace=True, p=draw_p)
        total = 0.0
        for i in order:
            feats, label = train[i]
            logits, _, cache = forward(
                feats, params, training=True, rng=drop_rng,
                dropout_p=config.dropout_p, max_patches=config.max_patches,
            )
            loss = balanced_ce_loss(predict_proba(logits), label, weights)
            if not np.isfinite(loss) or not np.isfinite(logits).all():
                raise DivergenceError(f"non-finite loss at epoch {epoch}, slide index {i}")
            total += loss
            adam_step(params, backward(cache, label, weights), state, config, lr=lr)

        val_loss = evaluate_loss(val, params, weights)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, total / len(train), val_loss, lr))
        log.debug("epoch %d train %.5f val %.5f lr %.3g", epoch, total / len(train), val_loss, lr)

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.copy()
        if val_loss < plateau_best - PLATEAU_THRESHOLD:
            plateau_best = val_loss
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.lr_decay_patience:
                lr *= config.lr_decay_factor
                bad_epochs = 0
    return best_params, history


def best_val_loss(history):
    return min(r.val_loss for r in history)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def read_history(path):
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
            for r in csv.DictReader(fh)
        ]


def write_checkpoint(path, params, config=None):
    dim, m1, m2, k = params.shape
    parts = [_ABML_HEADER.pack(ABML_MAGIC, ABML_VERSION, dim, m1, m2, k)]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays()]
    if config is not None:
        parts.append(dumps_kv(config.to_kv()).encode("utf-8"))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Returns (params, config or None)."""
    data = Path(path).read_bytes()
    if len(data) < _ABML_HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, dim, m1, m2, k = _ABML_HEADER.unpack_from(data)
    if magic != ABML_MAGIC or version != ABML_VERSION:
        raise CheckpointError(f"not an ABML v{ABML_VERSION} checkpoint")
    shapes = [(dim, m1), (m1,), (m1, m2), (m2,), (m2,), (m1, k), (k,)]
    off = _ABML_HEADER.size
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise CheckpointError("truncated checkpoint payload")
        arrays.append(np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64))
        off += 8 * count
    params = AbmilParams(*arrays)
    config = None
    tail = data[off:].decode("utf-8").strip()
    if tail:
        kv = dict(line.split("=", 1) for line in tail.splitlines() if "=" in line)
        config = TrainConfig.from_kv(kv)
    return params, config


__all__ = [
    "EpochRecord",
    "PARAM_NAMES",
    "best_val_loss",
    "evaluate_loss",
    "read_checkpoint",
    "read_history",
    "sampling_weights",
    "train_fold",
    "write_checkpoint",
    "write_history",
]
