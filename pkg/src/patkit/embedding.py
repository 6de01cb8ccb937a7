"""Absolute and relative position embedding (ARPE) plus the plain-MLP comparator."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import tensor as T
from .core.nn import MLP, Module
from .core.tensor import Tensor
from .errors import ContractError
from .geometry import CloudLike, PointCloud, dilated_neighbor_sample, position_set

# hidden widths at a 1024-wide embedding; scaled by c_out / 1024 otherwise
H_SIZES = (64, 128, 256)
GAMMA_HIDDEN = 512
MIN_WIDTH = 16


def default_widths(c_out: int) -> tuple[list[int], list[int]]:
    s = c_out / 1024
    h = [max(MIN_WIDTH, int(round(w * s))) for w in H_SIZES]
    gamma = [max(MIN_WIDTH, int(round(GAMMA_HIDDEN * s))), c_out]
    return h, gamma


def _batched(cloud: CloudLike) -> tuple[np.ndarray, bool]:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if pts.ndim == 2:
        return pts[None], True
    return pts, False


class ArpeLayer(Module):
    """Shared PointNet h over neighbour position pairs, max over K, then gamma."""

    def __init__(
        self,
        in_channels: int,
        c_out: int,
        rng: np.random.Generator,
        k: int = 32,
        d0: float = 2.0,
        n0: int = 1024,
        h_sizes: Optional[Sequence[int]] = None,
        gamma_sizes: Optional[Sequence[int]] = None,
        groups: int = 8,
    ):
        dh, dg = default_widths(c_out)
        h_sizes = list(h_sizes or dh)
        gamma_sizes = list(gamma_sizes or dg)
        if gamma_sizes[-1] != c_out:
            gamma_sizes.append(c_out)
        self.in_channels = in_channels
        self.c_out = c_out
        self.k, self.d0, self.n0 = k, d0, n0
        self.h = MLP([2 * in_channels] + h_sizes, rng, groups=groups)
        self.gamma = MLP([h_sizes[-1]] + gamma_sizes, rng, groups=groups)

    def forward(self, cloud, rng=None):
        return arpe(cloud, self, rng)


def arpe(cloud: CloudLike, layer: ArpeLayer, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Embed every point from its neighbour position set.

    Neighbours are sampled from the dilated pool while training with an
    rng; otherwise the exact top-K is used. K is capped at N - 1.
    """
    pts, single = _batched(cloud)
    n = pts.shape[1]
    if n < 2:
        raise ContractError("ARPE needs at least two points")
    if pts.shape[-1] != layer.in_channels:
        raise ContractError(f"expected {layer.in_channels} input channels, got {pts.shape[-1]}")
    k = min(layer.k, n - 1)
    sampler_rng = rng if layer.training else None
    nbrs = dilated_neighbor_sample(pts, k, layer.d0, layer.n0, sampler_rng)
    pairs = Tensor(position_set(pts, nbrs))
    feats = layer.h(pairs)
    pooled = T.reduce(feats, "max", axis=-2)
    out = layer.gamma(pooled)
    return T.reshape(out, out.shape[1:]) if single else out


class MlpEmbedding(Module):
    """Per-point MLP on raw coordinates with widths matching ARPE."""

    def __init__(self, in_channels: int, c_out: int, rng: np.random.Generator, groups: int = 8):
        h, gamma = default_widths(c_out)
        self.in_channels = in_channels
        self.c_out = c_out
        self.mlp = MLP([in_channels] + h + gamma, rng, groups=groups)

    def forward(self, cloud, rng=None):
        pts, single = _batched(cloud)
        out = self.mlp(Tensor(pts))
        return T.reshape(out, out.shape[1:]) if single else out
