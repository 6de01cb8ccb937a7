"""Minibatch training with Adam, step learning-rate decay and temperature annealing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..core import tensor as T
from ..dataio import Dataset, augment
from ..errors import ContractError, DivergenceError
from ..sampling import anneal
from .config import PATConfig
from .network import PATNet, class_from_logits, element_wise_loss, predict

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "loss", "acc", "tau", "lr"]
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class Adam:
    def __init__(self, params, lr: float = 1e-3, kind: str = "adam"):
        self.params = list(params)
        self.lr = lr
        self.kind = kind
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p.data -= p.dtype.type(self.lr) * g
            return
        c1 = 1 - BETA1**self.t
        c2 = 1 - BETA2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= BETA1
            m += (1 - BETA1) * g
            v *= BETA2
            v += (1 - BETA2) * g * g
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
            p.data -= upd.astype(p.dtype, copy=False)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= g.dtype.type(factor)
    return total


def learning_rate(cfg: PATConfig, epoch: int) -> float:
    every = cfg.optimizer.lr_halve_every
    return cfg.optimizer.lr * 0.5 ** (epoch // every) if every > 0 else cfg.optimizer.lr


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    tau: float = 1.0
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    optimizer: Optional[Adam] = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_step(model: PATNet, opt: Adam, points, labels, rng, clip_norm: float) -> tuple[float, np.ndarray]:
    logits = model(points, rng)
    loss = element_wise_loss(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at optimizer step {opt.t + 1}")
    grads = T.backward(loss, opt.params)
    glist = [grads[p] for p in opt.params]
    clip_global_norm(glist, clip_norm)
    opt.step(glist)
    return value, logits.data


def train(
    model: PATNet,
    data: Dataset,
    cfg: Optional[PATConfig] = None,
    out_dir=None,
    state: Optional[TrainState] = None,
    epochs: Optional[int] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Run epochs ``state.epoch .. epochs`` (default ``cfg.optimizer.epochs``).

    With ``out_dir``, per-epoch metrics go to ``metrics.csv`` and a
    checkpoint is written every ``checkpoint_every`` epochs and at the end.
    A fresh ``state`` seeds the batch rng from ``cfg.seed``; a resumed one
    restores it.
    """
    from .checkpoint import save_checkpoint

    cfg = cfg or model.cfg
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    total = cfg.optimizer.epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 1])
    if state is None:
        state = TrainState(tau=cfg.sampler.tau_start)
    elif state.rng_state:
        rng.bit_generator.state = state.rng_state
    if state.optimizer is None:
        state.optimizer = Adam(model.parameters(), cfg.optimizer.lr, cfg.optimizer.kind)
    opt = state.optimizer
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if state.epoch == 0 or not metrics_path.exists():
            with metrics_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    model.train()
    bs = cfg.optimizer.batch_size
    while state.epoch < total:
        epoch = state.epoch
        opt.lr = learning_rate(cfg, epoch)
        state.tau = anneal(cfg.sampler, epoch, cfg.optimizer.epochs)
        model.tau = state.tau
        losses, hits, seen = [], 0, 0
        for idx in _batches(len(data), bs, rng):
            pts = data.points[idx]
            if cfg.augment:
                pts = augment(pts, rng)
            labels = data.labels[idx]
            value, logits = train_step(model, opt, pts, labels, rng, cfg.optimizer.clip_norm)
            state.step += 1
            losses.append(value * len(idx))
            if labels.ndim == 1:
                hits += int((class_from_logits(logits) == labels).sum())
                seen += len(idx)
            else:
                hits += int((np.argmax(logits, axis=-1) == labels).sum())
                seen += labels.size
        state.epoch += 1
        row = {
            "epoch": state.epoch,
            "step": state.step,
            "loss": sum(losses) / len(data),
            "acc": hits / seen,
            "tau": state.tau,
            "lr": opt.lr,
        }
        state.history.append(row)
        state.rng_state = rng.bit_generator.state
        log.info("epoch %d loss %.4f acc %.3f tau %.4f lr %.2e", *(row[k] for k in METRICS_HEADER if k != "step"))
        if metrics_path is not None:
            with metrics_path.open("a", newline="") as fh:
                csv.writer(fh).writerow([format_metric(row[k]) for k in METRICS_HEADER])
            every = cfg.optimizer.checkpoint_every
            if state.epoch == total or (every > 0 and state.epoch % every == 0):
                save_checkpoint(out / "checkpoint.pat", model, cfg, state)
        if on_epoch is not None:
            on_epoch(row)
    return state


def format_metric(value) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


def evaluate(model: PATNet, data: Dataset, batch_size: int = 64, rng=None) -> tuple[float, np.ndarray]:
    """Accuracy (per cloud, or per point for segmentation) and the predictions."""
    preds = predict(model, data.points, rng=rng, batch_size=batch_size)
    return float(np.mean(preds == data.labels)), preds


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, m: int) -> np.ndarray:
    cm = np.zeros((m, m), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels).ravel(), np.asarray(preds).ravel()), 1)
    return cm


def mean_iou(labels: np.ndarray, preds: np.ndarray, m: int) -> float:
    cm = confusion_matrix(labels, preds, m)
    inter = np.diag(cm).astype(float)
    union = cm.sum(0) + cm.sum(1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean()) if present.any() else 0.0
