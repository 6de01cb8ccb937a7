"""Model and run configuration, plan strings and the ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..errors import ConfigError
from ..sampling import SamplerConfig

PlanStep = tuple[str, int]


def parse_plan(text: str) -> list[PlanStep]:
    """'fps384,gss128,gss64' -> [('fps', 384), ('gss', 128), ('gss', 64)]."""
    text = text.strip().lower()
    if text in ("", "none", "-"):
        return []
    plan = []
    for part in text.split(","):
        part = part.strip()
        method, digits = part[:3], part[3:]
        if method not in ("fps", "gss") or not digits.isdigit():
            raise ConfigError(f"bad plan step {part!r}; expected fpsN or gssN")
        plan.append((method, int(digits)))
    return plan


def format_plan(plan: list[PlanStep]) -> str:
    return ",".join(f"{m}{n}" for m, n in plan) or "none"


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    lr_halve_every: int = 15
    batch_size: int = 32
    epochs: int = 30
    clip_norm: float = 5.0
    checkpoint_every: int = 5


@dataclass
class PATConfig:
    task: str = "classify"
    n_points: int = 256
    f: int = 0
    c: int = 128
    g: int = 8
    n_gsa: int = 3
    downsample_plan: list = field(default_factory=lambda: parse_plan("fps96,gss32,gss16"))
    mlp_sizes: list = field(default_factory=lambda: [128, 64, 32])
    m: int = 4
    dropout: float = 0.2
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    # ablation switches
    attention: str = "gsa"
    heads: int = 8
    shuffle: bool = True
    norm: str = "gn"
    embedding: str = "arpe"
    # ARPE neighbourhood
    k: int = 16
    d0: float = 2.0
    n0: int = 1024
    fps_start: int = 0
    augment: bool = True
    seed: int = 0

    def validate(self) -> "PATConfig":
        if self.task not in ("classify", "segment"):
            raise ConfigError(f"task must be classify or segment, got {self.task!r}")
        if self.c % self.g:
            raise ConfigError(f"width {self.c} not divisible by {self.g} groups")
        if self.attention not in ("gsa", "mha"):
            raise ConfigError(f"attention must be gsa or mha, got {self.attention!r}")
        if self.attention == "mha" and self.c % self.heads:
            raise ConfigError(f"width {self.c} not divisible by {self.heads} heads")
        if self.norm not in ("gn", "ln"):
            raise ConfigError(f"norm must be gn or ln, got {self.norm!r}")
        if self.embedding not in ("arpe", "mlp"):
            raise ConfigError(f"embedding must be arpe or mlp, got {self.embedding!r}")
        if self.m < 1 or self.n_gsa < 0 or self.n_points < 2:
            raise ConfigError("need m >= 1, n_gsa >= 0 and at least two points")
        if self.task == "segment" and self.downsample_plan:
            raise ConfigError("segmentation models take no down-sampling plan")
        if len(self.downsample_plan) > self.n_gsa:
            raise ConfigError("plan has more levels than GSA layers")
        prev = self.n_points
        for method, size in self.downsample_plan:
            if method not in ("fps", "gss"):
                raise ConfigError(f"unknown down-sampling method {method!r}")
            if not 1 <= size < prev:
                raise ConfigError("down-sampling sizes must be strictly decreasing and below N")
            prev = size
        if self.optimizer.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer.kind!r}")
        return self

    @classmethod
    def desk_classifier(cls, **overrides) -> "PATConfig":
        return cls(**overrides).validate()

    @classmethod
    def desk_segmenter(cls, **overrides) -> "PATConfig":
        base = dict(task="segment", n_gsa=5, downsample_plan=[], m=4, augment=False)
        base.update(overrides)
        return cls(**base).validate()

    @classmethod
    def full_scale_classifier(cls, **overrides) -> "PATConfig":
        base = dict(
            n_points=1024,
            c=1024,
            downsample_plan=parse_plan("fps384,gss128,gss64"),
            mlp_sizes=[1024, 512, 256],
            k=32,
            m=40,
            optimizer=OptimConfig(batch_size=64, lr=1e-3, lr_halve_every=15, epochs=150),
        )
        base.update(overrides)
        return cls(**base).validate()


# -- flat key = value serialisation ---------------------------------------------------


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        if value and isinstance(value[0], tuple):
            return format_plan(value)
        return ",".join(str(v) for v in value)
    return str(value)


def to_mapping(cfg: PATConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = _format(getattr(value, sub.name))
        else:
            out[f.name] = _format(value)
    return out


def _coerce(text: str, current: Any, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(current, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, list):
            if key == "downsample_plan":
                return parse_plan(text)
            return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


ALIASES = {
    "plan": "downsample_plan",
    "width": "c",
    "groups": "g",
    "points": "n_points",
    "gsa_layers": "n_gsa",
    "classes": "m",
    "lr": "optimizer.lr",
    "epochs": "optimizer.epochs",
    "batch_size": "optimizer.batch_size",
    "tau_start": "sampler.tau_start",
    "tau_end": "sampler.tau_end",
    "infer_noise": "sampler.infer_noise",
}


def apply_overrides(cfg: PATConfig, pairs: dict[str, str]) -> PATConfig:
    """Return a copy of ``cfg`` with ``key -> text`` assignments applied."""
    cfg = dataclasses.replace(
        cfg,
        sampler=dataclasses.replace(cfg.sampler),
        optimizer=dataclasses.replace(cfg.optimizer),
        downsample_plan=list(cfg.downsample_plan),
        mlp_sizes=list(cfg.mlp_sizes),
    )
    for raw_key, text in pairs.items():
        key = ALIASES.get(raw_key.strip().replace("-", "_"), raw_key.strip().replace("-", "_"))
        target, name = cfg, key
        if "." in key:
            head, name = key.split(".", 1)
            if not hasattr(cfg, head) or not dataclasses.is_dataclass(getattr(cfg, head)):
                raise ConfigError(f"unknown config key {raw_key!r}")
            target = getattr(cfg, head)
        if not hasattr(target, name) or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key {raw_key!r}")
        setattr(target, name, _coerce(text, getattr(target, name), key))
    return cfg


def from_mapping(pairs: dict[str, str], base: Optional[PATConfig] = None) -> PATConfig:
    return apply_overrides(base or PATConfig(), pairs).validate()


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def read_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: PATConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_mapping(cfg).items())
