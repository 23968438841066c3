"""Flat ``key = value`` configuration with typed, validated defaults."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Tuple

from .errors import ConfigurationError

MODES = ("full", "adaptive", "attr_only", "vanilla")
FUSIONS = ("concat", "sum", "mean")
ATTR_SOURCES = ("extractor", "ground_truth")


@dataclass
class Config:
    seed: int = 0
    # data
    image_size: int = 64
    samples_per_class: int = 128
    shapes: List[str] = field(default_factory=lambda: ["circle", "square", "triangle", "bar"])
    colors: List[str] = field(default_factory=lambda: ["red", "green", "blue", "yellow", "purple", "orange"])
    textures: List[str] = field(default_factory=lambda: ["solid", "striped", "dotted"])
    backgrounds: List[str] = field(default_factory=lambda: ["white", "black", "gray"])
    max_attr_words: int = 1000
    n_attributes: int = 5
    # architecture
    mode: str = "full"
    grid_side: int = 7
    conv_channels: int = 16
    d: int = 64
    hidden: int = 128
    caption_embed: int = 64
    attr_embed: int = 16
    att_dim: int = 64
    attr_fusion: str = "concat"
    extractor_channels: int = 64
    extractor_fc: int = 64
    # optimisation
    epochs: int = 50
    attr_epochs: int = 10
    batch_size: int = 16
    lr: float = 4e-4
    attr_lr: float = 1e-3
    beta1: float = 0.8
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: bool = True
    beta_n: float = 1.0
    freeze_encoder: bool = False
    train_attr_source: str = "ground_truth"
    # inference / evaluation
    attr_source: str = "extractor"
    max_len: int = 16
    th: float = 0.6
    connectivity: int = 4

    def validate(self) -> "Config":
        def need(cond: bool, key: str, msg: str):
            if not cond:
                raise ConfigurationError(f"{key}: {msg}")

        need(self.image_size >= 8, "image_size", "must be >= 8")
        need(self.samples_per_class >= 1, "samples_per_class", "must be >= 1")
        for key in ("shapes", "colors", "textures", "backgrounds"):
            need(len(getattr(self, key)) > 0, key, "must be non-empty")
        need(self.n_attributes >= 1, "n_attributes", "must be >= 1")
        need(self.max_attr_words >= 1, "max_attr_words", "must be >= 1")
        need(self.mode in MODES, "mode", f"must be one of {', '.join(MODES)}")
        need(self.attr_fusion in FUSIONS, "attr_fusion", f"must be one of {', '.join(FUSIONS)}")
        need(self.attr_source in ATTR_SOURCES, "attr_source", f"must be one of {', '.join(ATTR_SOURCES)}")
        need(self.train_attr_source in ATTR_SOURCES, "train_attr_source",
             f"must be one of {', '.join(ATTR_SOURCES)}")
        for key in ("grid_side", "conv_channels", "d", "hidden", "caption_embed", "attr_embed",
                    "att_dim", "extractor_channels", "extractor_fc", "batch_size", "max_len"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        need(self.epochs >= 0 and self.attr_epochs >= 0, "epochs", "must be >= 0")
        need(self.lr > 0 and self.attr_lr > 0, "lr", "must be > 0")
        need(0 <= self.beta1 < 1, "beta1", "must be in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2", "must be in [0, 1)")
        need(self.adam_eps > 0, "adam_eps", "must be > 0")
        need(self.beta_n > 0, "beta_n", "must be > 0")
        need(0 <= self.th < 1, "th", "must be in [0, 1)")
        need(self.connectivity in (4, 8), "connectivity", "must be 4 or 8")
        return self

    @property
    def uses_attention(self) -> bool:
        return self.mode in ("full", "adaptive")

    @property
    def uses_attributes(self) -> bool:
        return self.mode in ("full", "attr_only")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes).validate()

    # -- text form -------------------------------------------------------

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                text = ",".join(v)
            elif isinstance(v, bool):
                text = "true" if v else "false"
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(Config)}


def _convert(key: str, raw: str, lineno: int):
    kind = _TYPES[key]
    where = f"{key} (line {lineno})"
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "List[str]":
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return items
        return raw
    except ValueError:
        raise ConfigurationError(f"{where}: bad {kind} value {raw!r}") from None


def parse_config_text(text: str, base: Config = None) -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigurationError(f"{key} (line {lineno}): unknown key")
        values[key] = (_convert(key, raw, lineno), lineno)
    cfg = dataclasses.replace(base or Config(), **{k: v for k, (v, _) in values.items()})
    try:
        return cfg.validate()
    except ConfigurationError as exc:
        key = str(exc).split(":", 1)[0]
        if key in values:
            raise ConfigurationError(f"{exc} (line {values[key][1]})") from None
        raise


def parse_config(path) -> Config:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_overrides(cfg: Config, pairs: List[Tuple[str, str]]) -> Config:
    text = "\n".join(f"{k} = {v}" for k, v in pairs)
    return parse_config_text(text, base=cfg)
