"""Losses, AdamW and the training loop for the adapter parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from moma.core import ops, rng as rngs
from moma.core.serialize import save_manifest
from moma.core.tensor import GradTape, Tensor
from moma.errors import DataError, TrainingDiverged
from moma.model import MoMaModel


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    distill: float = 0.1
    teacher: str = "per-frame"   # or "init-student"
    seed: int = 0


class AdamW:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, lr=3e-4, weight_decay=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        if self.lr == 0.0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update


def check_labels(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def loss(model: MoMaModel, pixels, labels, teacher_feats=None, distill: float = 0.1) -> tuple[Tensor, dict]:
    """Cross-entropy plus ``distill`` times the MSE between pooled student and teacher features."""
    labels = check_labels(labels, model.config.classes)
    feats = model.features(pixels)
    ce = ops.cross_entropy(model.logits(feats), labels)
    parts = {"ce": ce.item(), "distill": 0.0}
    if distill and teacher_feats is not None:
        d = ops.mse(feats, np.asarray(teacher_feats))
        parts["distill"] = d.item()
        return ops.add(ce, ops.mul(d, distill)), parts
    return ce, parts


def train_step(model: MoMaModel, pixels, labels, opt: AdamW, teacher_feats=None, distill: float = 0.1,
               dump_dir=None) -> dict:
    params = model.trainable()
    with GradTape() as tape:
        total, parts = loss(model, pixels, labels, teacher_feats, distill)
    value = total.item()
    if not math.isfinite(value):
        where = None
        if dump_dir is not None:
            tensors, roles = model.state()
            where = save_manifest(Path(dump_dir), tensors, roles).parent
        raise TrainingDiverged(f"non-finite loss {value} at step {opt.step_count + 1}", where)
    tape.backward(total)
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    for t in params.values():
        t.grad = None
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    opt.step(params, grads)
    return {"loss": value, "grad_norm": norm, **parts}


def predict(model: MoMaModel, pixels, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(pixels), batch_size):
        out.append(model.forward(pixels[i:i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.classes))


def accuracy(model: MoMaModel, pixels, labels, batch_size: int = 64) -> float:
    if len(labels) == 0:
        return float("nan")
    return float((predict(model, pixels, batch_size).argmax(axis=-1) == np.asarray(labels)).mean())


def teacher_targets(model: MoMaModel, pixels, mode: str = "per-frame", batch_size: int = 64) -> np.ndarray:
    """Pooled features the distillation term pulls towards; computed once per dataset."""
    chunks = []
    for i in range(0, len(pixels), batch_size):
        x = pixels[i:i + batch_size]
        if mode == "per-frame":
            chunks.append(model.teacher_features(x))
        elif mode == "init-student":
            chunks.append(model.features(x).data)
        else:
            raise ValueError(f"unknown teacher mode {mode!r}")
    return np.concatenate(chunks)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def last(self) -> dict:
        return self.rows[-1] if self.rows else {}


def fit(model: MoMaModel, train, val, cfg: TrainConfig, log=None, dump_dir=None) -> History:
    """Train for ``cfg.epochs`` epochs; ``train``/``val`` are (pixels, labels) pairs."""
    x_tr, y_tr = train
    x_va, y_va = val
    y_tr = check_labels(y_tr, model.config.classes)
    opt = AdamW(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    targets = teacher_targets(model, x_tr, cfg.teacher) if cfg.distill else None
    order_rng = rngs.stream(cfg.seed, "shuffle")
    hist = History()
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(x_tr))
        totals = {"loss": 0.0, "ce": 0.0, "distill": 0.0, "grad_norm": 0.0}
        steps = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            m = train_step(model, x_tr[idx], y_tr[idx], opt,
                           None if targets is None else targets[idx], cfg.distill, dump_dir)
            for k in totals:
                totals[k] += m[k]
            steps += 1
        row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in totals.items()},
               "val_acc": accuracy(model, x_va, y_va)}
        hist.rows.append(row)
        if log is not None:
            log(row)
    return hist
