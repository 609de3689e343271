"""Optimizers, the step learning-rate schedule and the epoch loop."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np

from .data import Dataset
from .errors import ConfigError, ContractError
from .layers import softmax_cross_entropy
from .models import ModelInstance, forward, predict
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

ADAM_DEFAULT_LR = 1e-3
CSV_HEADER = ("epoch", "lr", "train_loss", "top1", "top5")


@dataclass
class TrainConfig:
    optimizer: Literal["sgd_momentum", "adam"] = "sgd_momentum"
    base_lr: float | None = None  # None -> 0.01 for SGD, 1e-3 for Adam
    momentum: float = 0.9
    weight_decay: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    lr_step: int = 15
    lr_decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; valid: sgd_momentum, adam")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_step < 1:
            raise ConfigError("batch_size, epochs and lr_step must be positive")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    @property
    def lr(self) -> float:
        if self.base_lr is not None:
            return float(self.base_lr)
        return ADAM_DEFAULT_LR if self.optimizer == "adam" else 0.01

    def effective(self) -> dict:
        d = asdict(self)
        d["base_lr"] = self.lr
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    top1: float
    top5: float
    lr: float


def step_lr(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


def skips_decay(name: str) -> bool:
    """Biases and BN affine parameters are not weight-decayed."""
    return name.endswith((".bias", ".gamma", ".beta"))


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=0.0, velocity=None, no_decay=skips_decay):
    """In-place SGD with heavy-ball momentum and L2 weight decay.

    ``params`` and ``grads`` map names to arrays (or tensors); ``velocity`` is
    the per-name buffer dict, updated in place and returned.
    """
    velocity = {} if velocity is None else velocity
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        w = p.data if isinstance(p, Tensor) else p
        if g.shape != w.shape:
            raise ContractError(f"{name}: grad shape {g.shape} != param shape {w.shape}")
        if weight_decay and not no_decay(name):
            g = g + weight_decay * w
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        w -= (lr * v).astype(w.dtype, copy=False)
    return velocity


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, lr, betas=(0.9, 0.999), eps=1e-8, state=None,
              weight_decay=0.0, no_decay=skips_decay):
    """In-place bias-corrected Adam update; returns the advanced state."""
    state = AdamState() if state is None else state
    state.t += 1
    b1, b2 = betas
    c1, c2 = 1 - b1**state.t, 1 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        w = p.data if isinstance(p, Tensor) else p
        if g.shape != w.shape:
            raise ContractError(f"{name}: grad shape {g.shape} != param shape {w.shape}")
        if weight_decay and not no_decay(name):
            g = g + weight_decay * w
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype, copy=False)
    return state


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.steps = 0
        self._state = AdamState() if cfg.optimizer == "adam" else {}

    def step(self, params, grads, lr: float) -> None:
        c = self.cfg
        if c.optimizer == "adam":
            adam_step(params, grads, lr, c.adam_betas, c.adam_eps, self._state, c.weight_decay)
        else:
            sgd_step(params, grads, lr, c.momentum, c.weight_decay, self._state)
        self.steps += 1


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Percent of rows whose label ranks in the top k; ties rank lower indices first."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    true = logits[np.arange(len(labels)), labels][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (idx < labels[:, None])).sum(axis=1)
    return 100.0 * float(np.mean(rank < k))


def evaluate(m: ModelInstance, data: Dataset, k_list=(1, 5), batch_size: int = 256) -> tuple[float, ...]:
    logits = predict(m, data.images, batch_size)
    return tuple(topk_accuracy(logits, data.labels, k) for k in k_list)


def check_labels(m: ModelInstance, data: Dataset) -> None:
    k = m.spec.num_classes
    bad = np.flatnonzero((data.labels < 0) | (data.labels >= k))
    if bad.size:
        i = int(bad[0])
        raise ContractError(f"label {data.labels[i]} at sample index {i} outside [0, {k})")


def train(
    m: ModelInstance,
    data: Dataset,
    cfg: TrainConfig,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
) -> list[MetricsRecord]:
    """Seeded minibatch training; top-1/top-5 are eval-mode accuracy on ``data`` after each epoch."""
    if len(data) == 0:
        raise ContractError("training dataset is empty")
    check_labels(m, data)
    params = m.parameters()
    by_tensor = {id(t): n for n, t in params.items()}
    opt = Optimizer(cfg)
    n = len(data)
    records = []
    for epoch in range(cfg.epochs):
        lr = step_lr(epoch, cfg)
        order = np.random.default_rng(cfg.seed + epoch).permutation(n)
        m.train()
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = Tensor(data.images[idx].astype(m.dtype, copy=False))
            loss = softmax_cross_entropy(forward(m, x), data.labels[idx])
            grads = {by_tensor[id(t)]: g for t, g in backward(loss).items() if id(t) in by_tensor}
            opt.step(params, grads, lr)
            loss_sum += float(loss.data) * len(idx)
        top1, top5 = evaluate(m, data)
        rec = MetricsRecord(epoch, loss_sum / n, top1, top5, lr)
        log.info("epoch %d lr %.6f loss %.6f top1 %.2f top5 %.2f", epoch, lr, rec.train_loss, top1, top5)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    m.eval()
    return records


def metrics_csv(records: list[MetricsRecord], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment is not None:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.epoch, f"{r.lr:.6f}", f"{r.train_loss:.6f}", f"{r.top1:.6f}", f"{r.top5:.6f}"])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[MetricsRecord]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [
        MetricsRecord(int(r["epoch"]), float(r["train_loss"]), float(r["top1"]), float(r["top5"]), float(r["lr"]))
        for r in rows
    ]
