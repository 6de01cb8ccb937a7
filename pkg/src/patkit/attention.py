"""Self-attention operators on feature sets X of shape (..., N, c).

Includes the vanilla and non-linear self-attention, Group Attention with
channel shuffle (the GSA block), a shared-projection Multi-Head Attention
baseline, and closed-form parameter counts for both blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import tensor as T
from .core.nn import GroupNorm, LayerNorm, Linear, Module, Parameter, glorot_uniform, norm_groups
from .core.tensor import Tensor
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class GroupConfig:
    c: int
    g: int

    def __post_init__(self):
        if self.g < 1 or self.c % self.g:
            raise ConfigError(f"channel count {self.c} not divisible by {self.g} groups")

    @property
    def c_g(self) -> int:
        return self.c // self.g


def attn_weights(q, x) -> Tensor:
    """softmax(q x^T / sqrt(c)) with c the shared feature width."""
    q, x = T.as_tensor(q), T.as_tensor(x)
    if q.shape[-1] != x.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != input width {x.shape[-1]}")
    scores = T.matmul(q, x.swapaxes(-1, -2))
    return T.softmax(T.scale(scores, 1.0 / math.sqrt(x.shape[-1])), axis=-1)


def vanilla_attn(q, x) -> Tensor:
    x = T.as_tensor(x)
    return T.matmul(attn_weights(q, x), x)


def nonlinear_self_attn(x) -> Tensor:
    """Pre-activation attends to post-activation: S(x, x) . elu(x)."""
    x = T.as_tensor(x)
    return T.matmul(attn_weights(x, x), T.elu(x))


def channel_shuffle(x, g: int) -> Tensor:
    """Interleave g channel groups: out[j*g + i] = x[i*c_g + j]."""
    x = T.as_tensor(x)
    c = x.shape[-1]
    if g < 1 or c % g:
        raise ContractError(f"channel count {c} not divisible by {g} groups")
    lead = x.shape[:-1]
    y = T.reshape(x, lead + (g, c // g)).swapaxes(-1, -2)
    return T.reshape(y, lead + (c,))


def shuffle_permutation(c: int, g: int) -> np.ndarray:
    """Source channel for every output channel of ``channel_shuffle``."""
    return np.arange(c).reshape(g, c // g).T.reshape(-1)


class _GroupWeight(Module):
    def __init__(self, c_g: int, rng: np.random.Generator):
        self.weight = Parameter(glorot_uniform(rng, c_g, c_g))


class GsaLayer(Module):
    """Group Shuffle Attention block parameters.

    ``shuffle=False`` and ``norm='ln'`` are the ablation switches.
    """

    def __init__(self, c: int, g: int, rng: np.random.Generator, shuffle: bool = True, norm: str = "gn"):
        self.config = GroupConfig(c, g)
        self.group = [_GroupWeight(self.config.c_g, rng) for _ in range(g)]
        if norm == "gn":
            self.norm = GroupNorm(c, g)
        elif norm == "ln":
            self.norm = LayerNorm(c)
        else:
            raise ConfigError(f"unknown normalization {norm!r}")
        self.shuffle = shuffle

    def forward(self, x):
        return gsa(x, self)


def _groups_first(x: Tensor, g: int) -> Tensor:
    """(..., N, c) -> (..., g, N, c_g)."""
    lead, n, c = x.shape[:-2], x.shape[-2], x.shape[-1]
    y = T.reshape(x, lead + (n, g, c // g))
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(y, axes)


def _groups_last(y: Tensor) -> Tensor:
    """(..., g, N, c_g) -> (..., N, g*c_g), i.e. concat along channels."""
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    z = T.transpose(y, axes)
    return T.reshape(z, z.shape[:-2] + (z.shape[-2] * z.shape[-1],))


def group_attn(x, layer: GsaLayer) -> Tensor:
    """Per channel group i: non-linear self-attention on X^(i) W_i, then concat."""
    x = T.as_tensor(x)
    cfg = layer.config
    if x.shape[-1] != cfg.c:
        raise DimensionError(f"input width {x.shape[-1]} != layer width {cfg.c}")
    weights = T.stack([gw.weight for gw in layer.group], axis=0)
    xi = T.matmul(_groups_first(x, cfg.g), weights)
    return _groups_last(nonlinear_self_attn(xi))


def gsa(x, layer: GsaLayer) -> Tensor:
    """norm(shuffle(GroupAttn(x)) + x)."""
    x = T.as_tensor(x)
    y = group_attn(x, layer)
    if layer.shuffle:
        y = channel_shuffle(y, layer.config.g)
    return layer.norm(y + x)


class _HeadWeight(Module):
    def __init__(self, c: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(glorot_uniform(rng, c, d))


class MhaLayer(Module):
    """Multi-Head Attention baseline with one projection per head shared by K, Q, V.

    The position-wise MLP is FC - ELU - FC at width c; ``mlp=False`` drops it.
    The block is wrapped in the same residual + normalization as GSA.
    """

    def __init__(
        self,
        c: int,
        heads: int,
        rng: np.random.Generator,
        mlp: bool = True,
        norm: str = "gn",
        norm_g: int = 8,
    ):
        if heads < 1 or c % heads:
            raise ContractError(f"width {c} not divisible by {heads} heads")
        self.c = c
        self.heads_n = heads
        self.heads = [_HeadWeight(c, c // heads, rng) for _ in range(heads)]
        self.mlp = [Linear(c, c, rng), Linear(c, c, rng)] if mlp else []
        if norm == "gn":
            self.norm = GroupNorm(c, norm_groups(c, norm_g))
        elif norm == "ln":
            self.norm = LayerNorm(c)
        else:
            raise ConfigError(f"unknown normalization {norm!r}")

    def forward(self, x):
        return mha(x, self)


def mha_core(x, layer: MhaLayer) -> Tensor:
    """concat_h Attn(X W_h, X W_h) followed by the position-wise MLP."""
    x = T.as_tensor(x)
    if x.shape[-1] != layer.c:
        raise DimensionError(f"input width {x.shape[-1]} != layer width {layer.c}")
    heads = []
    for head in layer.heads:
        xh = T.matmul(x, head.weight)
        heads.append(vanilla_attn(xh, xh))
    y = T.concat(heads, axis=-1) if len(heads) > 1 else heads[0]
    if layer.mlp:
        y = layer.mlp[1](T.elu(layer.mlp[0](y)))
    return y


def mha(x, layer: MhaLayer) -> Tensor:
    x = T.as_tensor(x)
    return layer.norm(mha_core(x, layer) + x)


def gsa_param_count(c: int, g: int, norm: str = "gn") -> int:
    """c^2/g group weights plus 2c normalization affine."""
    GroupConfig(c, g)
    return c * c // g + 2 * c


def gsa_attention_count(c: int, g: int) -> int:
    GroupConfig(c, g)
    return c * c // g


def mha_param_count(c: int, heads: int, mlp: bool = True) -> int:
    """H projections of c x c/H, two c x c FC layers with bias, 2c affine."""
    if c % heads:
        raise ContractError(f"width {c} not divisible by {heads} heads")
    count = heads * c * (c // heads) + 2 * c
    if mlp:
        count += 2 * (c * c + c)
    return count


def mha_small_width(c: int, g: int, heads: int) -> int:
    """Largest width (multiple of ``heads``) whose MHA block fits within GSA(c, g)."""
    budget = gsa_param_count(c, g)
    width = heads
    while mha_param_count(width + heads, heads) <= budget:
        width += heads
    return width
