"""Run configuration: flat dotted keys, profiles and file/CLI overrides.

Config files are INI-style text. Keys may be written fully dotted at the top
of the file (``train.lr = 1e-3``) or inside a section (``[train]`` then
``lr = 1e-3``). Values are parsed as JSON when possible, otherwise kept as
strings; ``none``/``null`` mean unset.
"""

from __future__ import annotations

import configparser
import json
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import SIZES, ModelConfig

DEFAULTS: dict[str, Any] = {
    "profile": "desk",
    "model.size": "S",
    "model.depth": None,
    "model.hidden": None,
    "model.heads": None,
    "model.voxel": 16,
    "model.patch": 4,
    "model.window": 4,
    "model.window_blocks": None,
    "model.num_classes": None,
    "diffusion.T": 1000,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.02,
    "train.lr": 1e-4,
    "train.batch_size": 16,
    "train.epochs": 300,
    "train.cfg_dropout": 0.1,
    "train.seed": 0,
    "train.efficient": False,
    "train.finetune_from": None,
    "train.classes": None,
    "train.split": "train",
    "data.manifest": None,
    "data.points": 256,
    "sample.steps": 1000,
    "sample.guidance": 0.0,
    "sample.count": 16,
    "sample.seed": 0,
    "paths.checkpoint": None,
    "paths.log": None,
}

# values quoted from the original training setup, selectable as a profile
FULL_PROFILE = {
    "model.voxel": 32,
    "train.batch_size": 128,
    "train.epochs": 10000,
    "data.points": 2048,
}

_TYPES = {
    "model.depth": int, "model.hidden": int, "model.heads": int, "model.voxel": int, "model.patch": int,
    "model.window": int, "model.num_classes": int, "diffusion.T": int, "diffusion.beta_start": float,
    "diffusion.beta_end": float, "train.lr": float, "train.batch_size": int, "train.epochs": int,
    "train.cfg_dropout": float, "train.seed": int, "train.efficient": bool, "data.points": int,
    "sample.steps": int, "sample.guidance": float, "sample.count": int, "sample.seed": int,
}


def parse_value(text: str):
    s = text.strip()
    if s.lower() in ("none", "null", ""):
        return None
    if s.lower() in ("true", "yes", "on"):
        return True
    if s.lower() in ("false", "no", "off"):
        return False
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s.strip("\"'")


def _coerce(key: str, value):
    if value is None:
        return None
    typ = _TYPES.get(key)
    try:
        if typ is bool:
            if isinstance(value, str):
                return parse_value(value) is True
            return bool(value)
        if typ is not None:
            return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None
    if key == "model.window_blocks" and isinstance(value, str):
        return [int(v) for v in value.replace(",", " ").split()]
    if key == "train.classes" and isinstance(value, (str, int)):
        return [int(v) for v in str(value).replace(",", " ").split()]
    return value


def read_config_file(path) -> dict[str, Any]:
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            full = key if section == "__top__" else f"{section}.{key}"
            out[full] = parse_value(value)
    return out


class RunConfig:
    """Resolved settings: defaults < profile < config file < command line."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        self.sources: dict[str, str] = {k: "default" for k in DEFAULTS}
        if values:
            self.update(values, "override")

    def update(self, values: dict[str, Any], source: str) -> None:
        values = dict(values)
        profile = values.pop("profile", None)
        if profile is not None:
            self.apply_profile(profile, source)
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)
            self.sources[key] = source

    def apply_profile(self, name: str, source: str = "profile") -> None:
        if name not in ("desk", "full"):
            raise ConfigError(f"unknown profile {name!r}; expected 'desk' or 'full'")
        self.values["profile"] = name
        self.sources["profile"] = source
        if name == "full":
            for k, v in FULL_PROFILE.items():
                if self.sources[k] in ("default", "profile"):
                    self.values[k] = v
                    self.sources[k] = "profile:full"

    @classmethod
    def load(cls, path=None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg.update(read_config_file(path), f"file:{path}")
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None}, "cli")
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def echo(self) -> dict[str, Any]:
        """Fully resolved config plus where each value came from."""
        return {"values": dict(self.values), "sources": dict(self.sources), "profile": self.values["profile"]}

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        size = self.values["model.size"]
        if size not in SIZES and size != "custom":
            raise ConfigError(f"unknown model size {size!r}")
        depth, hidden, heads = SIZES.get(size, (None, None, None))
        depth = self.get("model.depth", depth)
        hidden = self.get("model.hidden", hidden)
        heads = self.get("model.heads", heads)
        if depth is None or hidden is None or heads is None:
            raise ConfigError("custom model size needs model.depth, model.hidden and model.heads")
        classes = self.get("model.num_classes", num_classes) or 1
        custom = any(self.sources[k] != "default" for k in ("model.depth", "model.hidden", "model.heads"))
        blocks = self.values["model.window_blocks"]
        return ModelConfig(
            depth=depth, hidden=hidden, heads=heads, patch=self["model.patch"], voxel=self["model.voxel"],
            window=self["model.window"], window_blocks=tuple(blocks) if blocks is not None else None,
            num_classes=classes, T=self["diffusion.T"], size="custom" if custom else size,
        )
