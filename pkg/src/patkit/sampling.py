"""Differentiable discrete sampling over point sets.

Scores enter in the log domain: a logit matrix is used directly where a
categorical's log-probabilities would go, which is equivalent up to the
additive constant that softmax ignores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import tensor as T
from .core.nn import Module, Parameter, glorot_uniform
from .core.tensor import Tensor
from .errors import ConfigError, ContractError, DimensionError

UNIFORM_EPS = 1e-12


@dataclass
class SamplerConfig:
    tau: float = 1.0
    tau_start: float = 1.0
    tau_end: float = 0.1
    mode: str = "train"
    infer_noise: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("train", "infer"):
            raise ConfigError(f"sampler mode must be 'train' or 'infer', got {self.mode!r}")
        if self.mode == "train" and not self.tau > 0:
            raise ConfigError("temperature must be positive in train mode")
        if self.tau_end > self.tau_start:
            raise ConfigError("tau_end must not exceed tau_start")


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) draws as float64."""
    return gumbel_from_uniform(rng.random(shape))


def _noise_for(logits: Tensor, rng, noise) -> Optional[np.ndarray]:
    if noise is not None:
        noise = np.asarray(noise)
        if noise.shape != logits.shape:
            raise DimensionError(f"noise shape {noise.shape} != logits shape {logits.shape}")
        return noise.astype(logits.dtype)
    if rng is not None:
        return gumbel_noise(logits.shape, rng).astype(logits.dtype)
    return None


def gumbel_softmax(
    logits,
    tau: float,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> Tensor:
    """softmax((logits + g) / tau) along the last axis.

    Noise comes from ``noise`` if given, else is drawn from ``rng``; with
    neither the noise is zero.
    """
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = T.as_tensor(logits)
    g = _noise_for(logits, rng, noise)
    z = logits + g if g is not None else logits
    return T.softmax(T.scale(z, 1.0 / tau), axis=-1)


def gumbel_max(
    logits,
    rng: Optional[np.random.Generator] = None,
    with_noise: bool = True,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One-hot argmax of logits (+ Gumbel noise); ties go to the lowest index."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if with_noise:
        if noise is None:
            if rng is None:
                raise ContractError("gumbel_max with noise needs an rng or explicit noise")
            noise = gumbel_noise(z.shape, rng)
        z = z + noise
    idx = np.argmax(z, axis=-1)
    out = np.zeros(z.shape)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def mil_pool(x, w) -> Tensor:
    """Attention MIL pooling: softmax(w X^T) X for X (..., N, c), w (c,)."""
    x, w = T.as_tensor(x), T.as_tensor(w)
    if w.shape[-1] != x.shape[-1]:
        raise DimensionError(f"pooling weight width {w.shape[-1]} != input width {x.shape[-1]}")
    scores = T.matmul(T.reshape(w, (1, w.shape[-1])), x.swapaxes(-1, -2))
    pooled = T.matmul(T.softmax(scores, axis=-1), x)
    return T.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))


def anneal(cfg: SamplerConfig, epoch: float, total_epochs: int) -> float:
    """Exponential schedule from tau_start (epoch 0) to tau_end (epoch total)."""
    if total_epochs < 1:
        raise ContractError("total_epochs must be >= 1")
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return float(cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac)


@dataclass
class GssTrace:
    """Which input row each output slot picked (hard argmax of the noisy scores)."""

    indices: np.ndarray
    margins: np.ndarray
    duplicates: int


class GssLayer(Module):
    """Gumbel Subset Sampling: one learned query row per output slot."""

    def __init__(self, c: int, n_out: int, rng: np.random.Generator):
        if n_out < 1:
            raise ConfigError("GSS output size must be >= 1")
        self.n_out = n_out
        self.weight = Parameter(glorot_uniform(rng, c, n_out, shape=(n_out, c)))

    def forward(self, x, cfg: SamplerConfig, rng=None, noise=None):
        return gss(x, self, cfg, rng, noise)


def _trace(z: np.ndarray) -> GssTrace:
    idx = np.argmax(z, axis=-1)
    if z.shape[-1] > 1:
        top2 = np.sort(z, axis=-1)[..., -2:]
        margins = top2[..., 1] - top2[..., 0]
    else:
        margins = np.full(idx.shape, np.inf)
    flat = idx.reshape(-1, idx.shape[-1])
    dup = int(sum(len(row) - len(np.unique(row)) for row in flat))
    return GssTrace(idx, margins, dup)


def gss(
    x,
    layer: GssLayer,
    cfg: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> tuple[Tensor, GssTrace]:
    """Select ``layer.n_out`` rows of x (..., N, c).

    Train mode returns soft rows gumbel_softmax(W X^T) X at temperature
    ``cfg.tau``. Infer mode copies, per slot, the input row with the largest
    score (plus Gumbel noise only when ``cfg.infer_noise``).
    """
    x = T.as_tensor(x)
    if x.shape[-1] != layer.weight.shape[-1]:
        raise DimensionError(f"input width {x.shape[-1]} != GSS width {layer.weight.shape[-1]}")
    logits = T.matmul(layer.weight, x.swapaxes(-1, -2))
    if cfg.mode == "train":
        g = _noise_for(logits, rng, noise)
        z = logits.data + g if g is not None else logits.data
        weights = gumbel_softmax(logits, cfg.tau, noise=g)
        return T.matmul(weights, x), _trace(z)
    z = logits.data.astype(np.float64)
    if cfg.infer_noise:
        if noise is None:
            if rng is None:
                raise ContractError("noisy inference needs an rng or explicit noise")
            noise = gumbel_noise(z.shape, rng)
        z = z + noise
    trace = _trace(z)
    if x.ndim == 2:
        return T.getitem(x, trace.indices), trace
    lead = x.shape[:-2]
    xb = T.reshape(x, (-1,) + x.shape[-2:])
    idx = trace.indices.reshape(xb.shape[0], -1)
    out = T.gather_rows(xb, idx)
    return T.reshape(out, lead + out.shape[-2:]), trace
