"""Run configuration: sectioned key=value files, flag overrides, provenance.

Every key has a typed schema entry and exactly one effective source
(default, file, or flag); unknown keys are rejected.  ``--print-config``
output re-parses to the same configuration because provenance is emitted as
full-line comments.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any

from .backbone import POS_MODES, BackboneConfig
from .pretrain import FimaeDecoderConfig, PretrainSettings
from .synthdata import GenSpec
from .tracker import DecoderConfig, FinetuneSettings


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(raw).split(",") if p.strip() != "")


def _parse_float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in str(raw).split(",") if p.strip() != "")


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "ints": _parse_int_tuple,
    "floats": _parse_float_tuple,
}


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (type name, default)
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "run": {
        "seed": ("int", 0),
    },
    "backbone": {
        "patch_size": ("int", 16),
        "embed_dim": ("int", 64),
        "depth": ("int", 4),
        "heads": ("int", 4),
        "mlp_ratio": ("float", 4.0),
        "frames": ("int", 6),
        "image_h": ("int", 96),
        "image_w": ("int", 96),
        "pos_mode": ("str", "frame_aware"),
    },
    "pretrain_decoder": {
        "decoder_dim": ("int", 32),
        "decoder_depth": ("int", 2),
        "decoder_heads": ("int", 4),
        "projector_dim": ("int", 256),
    },
    "masking": {
        "tube_ratio": ("float", 0.75),
        "frame_ratio": ("float", 0.98),
    },
    "pretrain": {
        "steps": ("int", 500),
        "batch_size": ("int", 2),
        "base_lr": ("float", 1.5e-4),
        "weight_decay": ("float", 1e-4),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.95),
        "warmup_frac": ("float", 0.075),
        "gaps": ("ints", (1, 2, 3, 4)),
        "aug_crop": ("bool", False),
        "log_every": ("int", 1),
    },
    "tracker": {
        "template_size": ("int", 32),
        "search_size": ("int", 96),
        "model_dim": ("int", 32),
        "depth": ("int", 2),
        "heads": ("int", 4),
        "head_channels": ("ints", (16, 16, 8, 4)),
        "lambda_mask": ("float", 1.0),
        "heatmap_sigma_mm": ("float", 5.0),
    },
    "finetune": {
        "steps": ("int", 600),
        "batch_size": ("int", 4),
        "base_lr": ("float", 6e-4),
        "weight_decay": ("float", 1e-4),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.95),
        "warmup_frac": ("float", 0.1),
        "jitter_px": ("int", 5),
        "flip_aug": ("bool", False),
        "log_every": ("int", 1),
    },
    "gen": {
        "extent": ("int", 96),
        "n_frames": ("int", 16),
        "amplitude_u": ("float", 2.0),
        "amplitude_v": ("float", 6.0),
        "period": ("float", 8.0),
        "drift_u": ("float", 0.6),
        "drift_v": ("float", 0.2),
        "curve_half_width": ("float", 1.5),
        "device_depth": ("float", 0.55),
        "noise_level": ("float", 0.02),
        "n_blobs": ("int", 3),
        "n_wires": ("int", 2),
        "spacing": ("float", 0.308),
        "fps": ("float", 15.0),
    },
    "eval": {
        "threshold_mm": ("float", 8.0),
        "noise_levels": ("floats", (0.0, 2.0, 4.0, 8.0, 16.0)),
    },
}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)     # "section.key" -> typed value
    sources: dict[str, str] = field(default_factory=dict)    # "section.key" -> provenance

    def __getitem__(self, dotted: str) -> Any:
        return self.values[dotted]

    # -- materialized sub-configs -------------------------------------------
    def backbone(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(
            patch_size=v["backbone.patch_size"], embed_dim=v["backbone.embed_dim"],
            depth=v["backbone.depth"], heads=v["backbone.heads"],
            mlp_ratio=v["backbone.mlp_ratio"], frames=v["backbone.frames"],
            image_h=v["backbone.image_h"], image_w=v["backbone.image_w"],
            pos_mode=v["backbone.pos_mode"])

    def pretrain_decoder(self) -> FimaeDecoderConfig:
        v = self.values
        return FimaeDecoderConfig(
            decoder_dim=v["pretrain_decoder.decoder_dim"],
            decoder_depth=v["pretrain_decoder.decoder_depth"],
            decoder_heads=v["pretrain_decoder.decoder_heads"],
            projector_dim=v["pretrain_decoder.projector_dim"])

    def pretrain_settings(self) -> PretrainSettings:
        v = self.values
        return PretrainSettings(
            steps=v["pretrain.steps"], batch_size=v["pretrain.batch_size"],
            base_lr=v["pretrain.base_lr"], weight_decay=v["pretrain.weight_decay"],
            betas=(v["pretrain.beta1"], v["pretrain.beta2"]),
            warmup_frac=v["pretrain.warmup_frac"], gaps=v["pretrain.gaps"],
            tube_ratio=v["masking.tube_ratio"], frame_ratio=v["masking.frame_ratio"],
            aug_crop=v["pretrain.aug_crop"], log_every=v["pretrain.log_every"])

    def tracker_decoder(self) -> DecoderConfig:
        v = self.values
        return DecoderConfig(
            model_dim=v["tracker.model_dim"], depth=v["tracker.depth"],
            heads=v["tracker.heads"], head_channels=v["tracker.head_channels"])

    def finetune_settings(self) -> FinetuneSettings:
        v = self.values
        return FinetuneSettings(
            steps=v["finetune.steps"], batch_size=v["finetune.batch_size"],
            base_lr=v["finetune.base_lr"], weight_decay=v["finetune.weight_decay"],
            betas=(v["finetune.beta1"], v["finetune.beta2"]),
            warmup_frac=v["finetune.warmup_frac"],
            lambda_mask=v["tracker.lambda_mask"],
            heatmap_sigma_mm=v["tracker.heatmap_sigma_mm"],
            jitter_px=v["finetune.jitter_px"], flip_aug=v["finetune.flip_aug"],
            log_every=v["finetune.log_every"])

    def gen_spec(self, seed: int | None = None, category: str = "clean") -> GenSpec:
        v = self.values
        return GenSpec(
            extent=v["gen.extent"], n_frames=v["gen.n_frames"],
            amplitude=(v["gen.amplitude_u"], v["gen.amplitude_v"]),
            period=v["gen.period"], drift=(v["gen.drift_u"], v["gen.drift_v"]),
            curve_half_width=v["gen.curve_half_width"], device_depth=v["gen.device_depth"],
            noise_level=v["gen.noise_level"], n_blobs=v["gen.n_blobs"],
            n_wires=v["gen.n_wires"], spacing=v["gen.spacing"], fps=v["gen.fps"],
            category=category, seed=self.values["run.seed"] if seed is None else seed)

    @property
    def seed(self) -> int:
        return self.values["run.seed"]


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["backbone.frames"] % 2:
        raise ConfigError(
            f"backbone.frames must be even for alternating tube/frame roles, got {v['backbone.frames']}")
    if v["backbone.pos_mode"] not in POS_MODES:
        raise ConfigError(f"backbone.pos_mode must be one of {POS_MODES}")
    for key in ("masking.tube_ratio", "masking.frame_ratio"):
        if not 0.0 <= v[key] <= 1.0:
            raise ConfigError(f"{key} must lie in [0, 1], got {v[key]}")
    try:
        cfg.backbone()
        cfg.pretrain_decoder().validate(v["backbone.patch_size"])
        cfg.tracker_decoder()
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(str(exc)) from exc
    p = v["backbone.patch_size"]
    if v["tracker.template_size"] % p or v["tracker.search_size"] % p:
        raise ConfigError("tracker template/search sizes must be multiples of the patch size")


def load_config(path: str | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    """Defaults, then file values, then --set flags, then --seed."""
    cfg = RunConfig()
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            cfg.values[f"{section}.{key}"] = default
            cfg.sources[f"{section}.{key}"] = "default"

    if path is not None:
        parser = configparser.RawConfigParser()
        parser.optionxform = str
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}] in {path}")
            for key, raw in parser.items(section):
                _apply(cfg, f"{section}.{key}", raw, f"file:{path}")

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _apply(cfg, dotted.strip(), raw.strip(), "flag")

    if seed is not None:
        cfg.values["run.seed"] = int(seed)
        cfg.sources["run.seed"] = "flag"

    _validate(cfg)
    return cfg


def _apply(cfg: RunConfig, dotted: str, raw: str, source: str) -> None:
    if "." not in dotted:
        raise ConfigError(f"key {dotted!r} must be section.key")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    type_name, _ = SCHEMA[section][key]
    try:
        value = _PARSERS[type_name](raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{dotted}: cannot parse {raw!r} as {type_name}") from exc
    cfg.values[dotted] = value
    cfg.sources[dotted] = source


def format_config(cfg: RunConfig) -> str:
    """INI text of the fully resolved configuration, provenance as comments."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            dotted = f"{section}.{key}"
            lines.append(f"# {key}: {cfg.sources[dotted]}")
            lines.append(f"{key} = {_fmt(cfg.values[dotted])}")
        lines.append("")
    return "\n".join(lines)
