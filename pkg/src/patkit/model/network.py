"""PAT classification and segmentation networks, loss and prediction."""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import numpy as np

from ..attention import GsaLayer, MhaLayer
from ..core import tensor as T
from ..core.nn import MLP, Linear, Module
from ..core.tensor import Tensor
from ..embedding import ArpeLayer, MlpEmbedding
from ..errors import ConfigError, ContractError, DimensionError
from ..geometry import fps
from ..sampling import GssLayer, SamplerConfig, gss
from .config import PATConfig


class PATNet(Module):
    """Embedding, attention blocks interleaved with down-sampling, per-point head.

    ``forward`` maps a batch of clouds (B, N, 3+f) to per-point logits
    (B, R, m), where R is the size of the last down-sampling step (or N).
    After each forward, ``last_indices`` holds the original point ids that
    reached the head, shape (B, R).
    """

    def __init__(self, cfg: PATConfig, rng: Optional[np.random.Generator] = None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        in_ch = 3 + cfg.f
        if cfg.embedding == "arpe":
            self.embed = ArpeLayer(in_ch, cfg.c, rng, k=cfg.k, d0=cfg.d0, n0=cfg.n0, groups=cfg.g)
        else:
            self.embed = MlpEmbedding(in_ch, cfg.c, rng, groups=cfg.g)
        if cfg.attention == "gsa":
            self.blocks = [GsaLayer(cfg.c, cfg.g, rng, shuffle=cfg.shuffle, norm=cfg.norm) for _ in range(cfg.n_gsa)]
        else:
            self.blocks = [MhaLayer(cfg.c, cfg.heads, rng, norm=cfg.norm, norm_g=cfg.g) for _ in range(cfg.n_gsa)]
        self.samplers = [GssLayer(cfg.c, size, rng) for method, size in cfg.downsample_plan if method == "gss"]
        self.head = MLP([cfg.c] + list(cfg.mlp_sizes), rng, groups=cfg.g, dropout=cfg.dropout)
        self.logits = Linear(cfg.mlp_sizes[-1] if cfg.mlp_sizes else cfg.c, cfg.m, rng)
        self.tau = cfg.sampler.tau_start
        self.infer_noise = cfg.sampler.infer_noise
        self.last_indices: Optional[np.ndarray] = None
        self.last_margins: list[np.ndarray] = []

    def sampler_config(self) -> SamplerConfig:
        mode = "train" if self.training else "infer"
        return SamplerConfig(
            tau=self.tau,
            tau_start=self.cfg.sampler.tau_start,
            tau_end=self.cfg.sampler.tau_end,
            mode=mode,
            infer_noise=self.infer_noise,
        )

    def forward(self, points, rng: Optional[np.random.Generator] = None) -> Tensor:
        pts = np.asarray(points.data if isinstance(points, Tensor) else points)
        single = pts.ndim == 2
        if single:
            pts = pts[None]
        if pts.shape[-1] != 3 + self.cfg.f:
            raise DimensionError(f"expected {3 + self.cfg.f} input channels, got {pts.shape[-1]}")
        pts = pts.astype(T.get_default_dtype(), copy=False)
        b, n = pts.shape[:2]
        xyz = pts[..., :3]
        ids = np.broadcast_to(np.arange(n), (b, n))
        rows = np.arange(b)[:, None]
        x = self.embed(pts, rng)
        plan = self.cfg.downsample_plan
        samplers = iter(self.samplers)
        scfg = self.sampler_config()
        self.last_margins = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i >= len(plan):
                continue
            method, size = plan[i]
            if method == "fps":
                idx = fps(xyz, size, self.cfg.fps_start)
                x = T.gather_rows(x, idx)
            else:
                x, trace = gss(x, next(samplers), scfg, rng)
                idx = trace.indices
                self.last_margins.append(trace.margins)
            xyz = xyz[rows, idx]
            ids = ids[rows, idx]
        self.last_indices = np.array(ids)
        y = self.logits(self.head(x, rng))
        return T.reshape(y, y.shape[1:]) if single else y


def build_classifier(cfg: PATConfig, rng: Optional[np.random.Generator] = None) -> PATNet:
    if cfg.task != "classify":
        raise ConfigError("build_classifier needs task = classify")
    return PATNet(cfg, rng)


def build_segmenter(cfg: PATConfig, rng: Optional[np.random.Generator] = None) -> PATNet:
    if cfg.task != "segment":
        raise ConfigError("build_segmenter needs task = segment")
    if cfg.downsample_plan:
        raise ConfigError("segmentation models take no down-sampling plan")
    return PATNet(cfg, rng)


def build_model(cfg: PATConfig, rng: Optional[np.random.Generator] = None) -> PATNet:
    return build_classifier(cfg, rng) if cfg.task == "classify" else build_segmenter(cfg, rng)


def element_wise_loss(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over every remaining point.

    ``logits`` is (R, m) or (B, R, m). A label per cloud (scalar or (B,))
    is broadcast to all its points; per-point labels have shape (R,) or (B, R).
    """
    logits = T.as_tensor(logits)
    if logits.ndim == 2:
        logits = T.reshape(logits, (1,) + logits.shape)
        labels = np.asarray(labels)[None]
    b, r, m = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape == (b,):
        labels = np.repeat(labels[:, None], r, axis=1)
    if labels.shape != (b, r):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    return T.cross_entropy(T.reshape(logits, (b * r, m)), labels.reshape(-1))


def point_scores(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_from_logits(logits) -> np.ndarray:
    """Argmax of the per-point softmax scores averaged over points."""
    return np.argmax(point_scores(logits).mean(axis=-2), axis=-1)


def predict(model: PATNet, points, rng: Optional[np.random.Generator] = None, batch_size: int = 64) -> np.ndarray:
    """Class id per cloud (classification) or per point (segmentation), in inference mode."""
    pts = np.asarray(points)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    was_training = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for start in range(0, len(pts), batch_size):
                logits = model(pts[start : start + batch_size], rng)
                if model.cfg.task == "classify":
                    out.append(class_from_logits(logits))
                else:
                    out.append(np.argmax(logits.data, axis=-1))
    finally:
        model.train(was_training)
    res = np.concatenate(out)
    return res[0] if single else res


def param_count(model: Module) -> "OrderedDict[str, int]":
    """Trainable scalar counts per top-level module path, plus 'total'."""
    counts: OrderedDict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("blocks", "samplers") else parts[0]
        counts[key] = counts.get(key, 0) + p.size
    counts["total"] = sum(v for k, v in counts.items())
    return counts


def check_labels(labels: np.ndarray, m: int) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ContractError(f"labels must lie in [0, {m})")
