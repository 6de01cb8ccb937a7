"""Parameters, module containers and the basic layers built on them."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from ..errors import ConfigError, ContractError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor. ``name`` is filled in with its dotted module path."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Minimal container: parameters and sub-modules are discovered from attributes."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                raise ContractError(f"parameter {name} is registered twice")
            seen.add(id(p))
            p.name = name
            yield name, p

    def _walk(self, prefix: str):
        for key, child in self._children():
            path = f"{prefix}{key}"
            if isinstance(child, Parameter):
                yield path, child
            else:
                yield from child._walk(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(glorot_uniform(rng, in_features, out_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest group count <= ``preferred`` dividing ``channels``."""
    g = max(1, min(preferred, channels))
    while channels % g:
        g -= 1
    return g


class MLP(Module):
    """Stack of FC - GN - ELU (- dropout) blocks applied on the last axis.

    ``final_activation=False`` leaves the last FC bare (used for logits).
    """

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator,
        groups: int = 8,
        dropout: float = 0.0,
        final_activation: bool = True,
    ):
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        n_act = len(self.layers) if final_activation else len(self.layers) - 1
        self.norms = [GroupNorm(s, norm_groups(s, groups)) for s in sizes[1 : n_act + 1]]
        self.dropout = dropout

    def forward(self, x, rng: Optional[np.random.Generator] = None):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.norms):
                x = T.elu(self.norms[i](x))
                if self.dropout and self.training and rng is not None:
                    x = T.dropout(x, self.dropout, rng)
        return x
