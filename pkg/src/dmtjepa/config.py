"""Run configuration: strict JSON tree, named presets, dotted overrides.

A config is a nested dict validated against the preset skeleton: unknown
keys are rejected with their full dotted path, and every section is
materialized into its typed domain object (which applies the numeric
invariants) before any compute starts. ``--set a.b.c=value`` overrides
parse the value as JSON, falling back to a bare string.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticShapesSpec
from .masking import MaskSamplerConfig
from .neighbors import ALL_PATCHES, NeighborhoodSpec
from .optim import Schedules
from .targets import HEAD_KINDS
from .vit import EncoderConfig, PredictorConfig


class ConfigError(ValueError):
    """A configuration file or override is invalid."""


OBJECTIVES = ("dmt", "ijepa", "mae", "mix")
CONTEXT_MODES = ("full_aggregated", "aggregated")

_TINY: dict = {
    "seed": 0,
    "out_dir": "runs/tiny",
    "objective": "dmt",
    "mix_lambda": 0.0,
    "context_mode": "full_aggregated",
    "gelu": "exact",
    "mae_mask_ratio": 0.75,
    "encoder": {
        "depth": 4,
        "heads": 4,
        "embed_dim": 64,
        "mlp_ratio": 4.0,
        "patch_size": 8,
        "image_size": [32, 32],
        "channels": 1,
        "pos_embedding": "sinusoidal",
    },
    "predictor": {"depth": 2, "embed_dim": 32, "heads": 4},
    "masking": {
        "num_targets": 4,
        "target_scale": [0.15, 0.2],
        "target_aspect": [0.75, 1.5],
        "context_scale": [0.85, 1.0],
    },
    "neighborhood": {"window": 3, "include_self": False, "k": 4},
    "heads": {
        "context_head": "cross_attention",
        "target_head": "cross_attention",
        "learned_projections": False,
        "target_standardize": False,
    },
    "schedule": {
        "total_epochs": 100,
        "warmup_epochs": 5,
        "batch_size": 64,
        "lr_start": 1e-4,
        "lr_peak": 1e-3,
        "lr_final": 1e-6,
        "wd_start": 0.04,
        "wd_final": 0.4,
        "ema_start": 0.996,
        "ema_final": 1.0,
    },
    "optimizer": {
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "grad_clip": 0.0,
        "decay_exempt": ["bias", "gamma", "beta", "pos_embed", "mask_token"],
    },
    "data": {
        "source": "synthetic",
        "count": 256,
        "test_count": 256,
        "num_classes": 3,
        "shapes_per_image": 1,
        "fg_range": [0.65, 0.95],
        "bg_range": [0.05, 0.35],
        "noise_sigma": 0.02,
        "corpus_dir": None,
        "manifest": "manifest.txt",
    },
}

_PAPER_B16_DELTA: dict = {
    "out_dir": "runs/paper-b16",
    "encoder": {
        "depth": 12,
        "heads": 12,
        "embed_dim": 768,
        "patch_size": 16,
        "image_size": [224, 224],
        "channels": 3,
    },
    "predictor": {"depth": 6, "embed_dim": 384, "heads": 12},
    "schedule": {"total_epochs": 600, "warmup_epochs": 15, "batch_size": 2048},
    "data": {"source": "corpus", "corpus_dir": "data/imagenet-dmtj"},
}

PRESETS = ("tiny", "paper-b16")


def _merge(base: dict, incoming: dict, path: str = "") -> None:
    for key, value in incoming.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a section, got {type(value).__name__}")
            _merge(base[key], value, here)
        else:
            base[key] = value


def preset_tree(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    tree = copy.deepcopy(_TINY)
    if name == "paper-b16":
        _merge(tree, copy.deepcopy(_PAPER_B16_DELTA))
    return tree


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class RunConfig:
    """The fully merged and validated configuration tree."""

    tree: dict = field(default_factory=lambda: copy.deepcopy(_TINY))

    # -- construction --------------------------------------------------
    @classmethod
    def from_sources(cls, preset: str = "tiny", config_path=None,
                     overrides: list[str] | None = None,
                     seed: int | None = None, out_dir: str | None = None) -> "RunConfig":
        tree = preset_tree(preset)
        if config_path is not None:
            try:
                loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{config_path}: not valid JSON ({exc})") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"{config_path}: top level must be an object")
            _merge(tree, loaded)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key.path=value")
            dotted, _, value = item.partition("=")
            node = tree
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key: {dotted}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node[parts[-1]] = _parse_override_value(value)
        if seed is not None:
            tree["seed"] = seed
        if out_dir is not None:
            tree["out_dir"] = out_dir
        cfg = cls(tree)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        tree = preset_tree("tiny")
        _merge(tree, json.loads(text))
        cfg = cls(tree)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.tree, sort_keys=True, separators=(",", ":"))

    # -- typed accessors ------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def out_dir(self) -> str:
        return str(self.tree["out_dir"])

    @property
    def objective(self) -> str:
        return self.tree["objective"]

    @property
    def mix_lambda(self) -> float:
        return float(self.tree["mix_lambda"])

    @property
    def context_mode(self) -> str:
        return self.tree["context_mode"]

    @property
    def gelu_mode(self) -> str:
        return self.tree["gelu"]

    @property
    def mae_mask_ratio(self) -> float:
        return float(self.tree["mae_mask_ratio"])

    def encoder_config(self) -> EncoderConfig:
        e = self.tree["encoder"]
        try:
            return EncoderConfig(
                depth=int(e["depth"]),
                heads=int(e["heads"]),
                embed_dim=int(e["embed_dim"]),
                mlp_ratio=float(e["mlp_ratio"]),
                patch_size=int(e["patch_size"]),
                image_size=tuple(int(x) for x in e["image_size"]),
                channels=int(e["channels"]),
                pos_embedding=str(e["pos_embedding"]),
            )
        except ValueError as exc:
            raise ConfigError(f"encoder: {exc}") from exc

    def predictor_config(self) -> PredictorConfig:
        p = self.tree["predictor"]
        try:
            return PredictorConfig(depth=int(p["depth"]), embed_dim=int(p["embed_dim"]), heads=int(p["heads"]))
        except ValueError as exc:
            raise ConfigError(f"predictor: {exc}") from exc

    def mask_config(self) -> MaskSamplerConfig:
        m = self.tree["masking"]
        try:
            return MaskSamplerConfig(
                num_targets=int(m["num_targets"]),
                target_scale=tuple(float(x) for x in m["target_scale"]),
                target_aspect=tuple(float(x) for x in m["target_aspect"]),
                context_scale=tuple(float(x) for x in m["context_scale"]),
            )
        except ValueError as exc:
            raise ConfigError(f"masking: {exc}") from exc

    def neighborhood_spec(self) -> NeighborhoodSpec:
        n = self.tree["neighborhood"]
        window = n["window"]
        if window == "all":
            window = ALL_PATCHES
        try:
            return NeighborhoodSpec(window=int(window), include_self=bool(n["include_self"]), k=int(n["k"]))
        except ValueError as exc:
            raise ConfigError(f"neighborhood: {exc}") from exc

    def schedules(self, steps_per_epoch: int) -> Schedules:
        s = self.tree["schedule"]
        try:
            return Schedules(
                total_epochs=int(s["total_epochs"]),
                warmup_epochs=int(s["warmup_epochs"]),
                steps_per_epoch=steps_per_epoch,
                lr_start=float(s["lr_start"]),
                lr_peak=float(s["lr_peak"]),
                lr_final=float(s["lr_final"]),
                wd_start=float(s["wd_start"]),
                wd_final=float(s["wd_final"]),
                ema_start=float(s["ema_start"]),
                ema_final=float(s["ema_final"]),
            )
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc

    @property
    def batch_size(self) -> int:
        return int(self.tree["schedule"]["batch_size"])

    def synthetic_spec(self) -> SyntheticShapesSpec:
        d = self.tree["data"]
        enc = self.tree["encoder"]
        try:
            return SyntheticShapesSpec(
                image_size=tuple(int(x) for x in enc["image_size"]),
                channels=int(enc["channels"]),
                num_classes=int(d["num_classes"]),
                shapes_per_image=int(d["shapes_per_image"]),
                fg_range=tuple(float(x) for x in d["fg_range"]),
                bg_range=tuple(float(x) for x in d["bg_range"]),
                noise_sigma=float(d["noise_sigma"]),
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from exc

    # -- validation -----------------------------------------------------
    def validate(self) -> None:
        if self.tree["objective"] not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if not 0.0 <= self.mix_lambda <= 1.0:
            raise ConfigError("mix_lambda must lie in [0, 1]")
        if self.tree["context_mode"] not in CONTEXT_MODES:
            raise ConfigError(f"context_mode must be one of {CONTEXT_MODES}")
        if self.tree["gelu"] not in ("exact", "tanh"):
            raise ConfigError("gelu must be 'exact' or 'tanh'")
        if not 0.0 < self.mae_mask_ratio < 1.0:
            raise ConfigError("mae_mask_ratio must lie in (0, 1)")
        heads = self.tree["heads"]
        for key in ("context_head", "target_head"):
            if heads[key] not in HEAD_KINDS:
                raise ConfigError(f"heads.{key} must be one of {HEAD_KINDS}")
        if self.tree["data"]["source"] not in ("synthetic", "corpus"):
            raise ConfigError("data.source must be 'synthetic' or 'corpus'")
        if int(self.tree["data"]["count"]) < 1 or int(self.tree["data"]["test_count"]) < 1:
            raise ConfigError("data.count and data.test_count must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("schedule.batch_size must be >= 1")
        if int(self.tree["seed"]) < 0:
            raise ConfigError("seed must be non-negative")
        # Materialize every section so its own invariants run now.
        self.encoder_config()
        self.predictor_config()
        self.mask_config()
        self.neighborhood_spec()
        self.schedules(steps_per_epoch=1)
        if self.tree["data"]["source"] == "synthetic":
            self.synthetic_spec()
