"""Plain-text experiment configuration.

Grammar: one `key = value` per line, `#` starts a full-line comment, blank
lines ignored. Keys come from a fixed registry; anything else is rejected.
Missing keys take their registry default and are reported via the
ExperimentConfig.defaulted tuple so the CLI can log a notice. Rendering
writes every key back out, so parse(render(cfg)) == cfg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .adversarial import LossWeights
from .dataset import SynthSpec
from .errors import ConfigError
from .features import FeatureConfig, TransformSpec
from .train import TrainConfig


@dataclass(frozen=True)
class ConfigKey:
    name: str
    kind: str  # int | float | opt_int | opt_float | str | int_list | str_list
    default: object
    help: str


_KEYS = (
    ConfigKey("features.sample_rate", "int", 48000, "expected WAV sample rate"),
    ConfigKey("features.n_fft", "int", 2048, "FFT frame length (power of two)"),
    ConfigKey("features.hop", "int", 512, "hop between frames in samples"),
    ConfigKey("features.window", "str", "hann", "analysis window: hann | rectangular"),
    ConfigKey("features.db_floor", "float", -80.0, "dB clip floor"),
    ConfigKey("transform.kind", "str", "idx", "idx | stanx | logx | sigmoidx | gammax"),
    ConfigKey("transform.gamma", "float", 4.2, "gammax exponent"),
    ConfigKey("data.manifest", "str", "", "manifest JSON path (empty = synthetic only)"),
    ConfigKey("data.cache_dir", "str", "", "feature cache directory"),
    ConfigKey("data.split_seed", "int", 0, "train/val/test split seed"),
    ConfigKey("data.train_ratio", "float", 0.7, "train split ratio"),
    ConfigKey("data.val_ratio", "float", 0.1, "validation split ratio"),
    ConfigKey("data.test_ratio", "float", 0.2, "test split ratio"),
    ConfigKey("train.model", "str", "faraday", "bsm | bmm | bfm | faraday | dirac"),
    ConfigKey("train.epochs", "int", 20, "training epochs"),
    ConfigKey("train.batch_size", "int", 128, "batch size"),
    ConfigKey("train.val_interval_steps", "int", 40, "steps between validations"),
    ConfigKey("train.lr", "opt_float", None, "learning rate (none = per-model default)"),
    ConfigKey("train.beta1", "opt_float", None, "Adam beta1 (none = per-model default)"),
    ConfigKey("train.lam", "float", 1.0, "target classification weight"),
    ConfigKey("train.beta", "float", 1.0, "head loss weight"),
    ConfigKey("train.gamma", "float", 1.0, "generator classification weight"),
    ConfigKey("train.disc_steps", "int", 1, "dirac discriminator passes per step"),
    ConfigKey("train.seed", "int", 0, "training seed"),
    ConfigKey("train.n_source", "opt_int", None, "source train subsample (none = all)"),
    ConfigKey("train.n_target", "opt_int", None, "target train subsample (none = all)"),
    ConfigKey("grid.models", "str_list", ["bsm", "faraday", "dirac"], "models in the grid"),
    ConfigKey("grid.source_sizes", "int_list", [2000], "source train sizes"),
    ConfigKey("grid.target_sizes", "int_list", [50], "target train sizes"),
    ConfigKey("grid.repeats", "int", 3, "seeds per cell"),
    ConfigKey("grid.base_seed", "int", 0, "first per-cell seed"),
    ConfigKey("synth.dim", "int", 1025, "synthetic feature dimension"),
    ConfigKey("synth.n_source", "int", 3000, "synthetic source rows"),
    ConfigKey("synth.n_target", "int", 1000, "synthetic target rows"),
    ConfigKey("synth.class_sep", "float", 4.0, "latent class separation"),
    ConfigKey("synth.domain_shift", "float", 3.0, "target offset magnitude"),
    ConfigKey("synth.domain_scale", "float", 1.0, "target scale factor"),
    ConfigKey("synth.seed", "int", 0, "synthetic data seed"),
    ConfigKey("synth.distort_scale", "float", 1.0, "affine distortion of raw features"),
    ConfigKey("synth.distort_offset", "float", 0.0, "affine distortion offset"),
    ConfigKey("infer.min_duration", "float", 0.0, "drop predicted intervals shorter than this"),
    ConfigKey("infer.domain", "str", "target", "encoder used for new audio: source | target"),
    ConfigKey("out.dir", "str", "out", "output directory"),
)

REGISTRY = {k.name: k for k in _KEYS}


def _parse_value(key: ConfigKey, raw: str):
    raw = raw.strip()
    try:
        if key.kind == "int":
            return int(raw)
        if key.kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError("not finite")
            return value
        if key.kind == "opt_int":
            return None if raw.lower() == "none" else int(raw)
        if key.kind == "opt_float":
            return None if raw.lower() == "none" else float(raw)
        if key.kind == "str":
            return raw
        if key.kind == "int_list":
            return [int(p) for p in raw.split(",") if p.strip()]
        if key.kind == "str_list":
            return [p.strip() for p in raw.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"config key {key.name}: bad {key.kind} value {raw!r}") from exc
    raise ConfigError(f"config key {key.name}: unhandled kind {key.kind}")


def _render_value(key: ConfigKey, value) -> str:
    if value is None:
        return "none"
    if key.kind in ("int_list", "str_list"):
        return ",".join(str(v) for v in value)
    if key.kind in ("float", "opt_float"):
        return repr(float(value))
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict
    defaulted: tuple = field(default=(), compare=False)

    def __getitem__(self, name: str):
        if name not in REGISTRY:
            raise ConfigError(f"unknown config key {name!r}")
        return self.values[name]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        merged = dict(self.values)
        for name, value in overrides.items():
            if name not in REGISTRY:
                raise ConfigError(f"unknown config key {name!r}")
            merged[name] = value
        return ExperimentConfig(merged, self.defaulted)


def default_config() -> ExperimentConfig:
    return ExperimentConfig({k.name: k.default for k in _KEYS},
                            tuple(k.name for k in _KEYS))


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key = value, got {stripped!r}")
        name, _, raw = stripped.partition("=")
        name = name.strip()
        if name not in REGISTRY:
            raise ConfigError(f"config line {lineno}: unknown key {name!r}")
        if name in values:
            raise ConfigError(f"config line {lineno}: duplicate key {name!r}")
        values[name] = _parse_value(REGISTRY[name], raw)
    defaulted = tuple(k.name for k in _KEYS if k.name not in values)
    for name in defaulted:
        values[name] = REGISTRY[name].default
    return ExperimentConfig(values, defaulted)


def render_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k.name} = {_render_value(k, cfg.values[k.name])}" for k in _KEYS]
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def parse_spec_string(text: str, base: dict) -> dict:
    """key=value[,key=value...] overrides for the synth.* section, applied on
    top of the config file's values (keys given without the synth. prefix)."""
    merged = dict(base)
    if not text:
        return merged
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad synthetic spec fragment {part!r}; expected key=value")
        name, _, raw = part.partition("=")
        full = f"synth.{name.strip()}"
        if full not in REGISTRY:
            raise ConfigError(f"unknown synthetic spec key {name.strip()!r}")
        merged[full] = _parse_value(REGISTRY[full], raw)
    return merged


# Typed views over the flat key space.


def feature_config(cfg: ExperimentConfig) -> FeatureConfig:
    return FeatureConfig(
        sample_rate=cfg["features.sample_rate"],
        n_fft=cfg["features.n_fft"],
        hop=cfg["features.hop"],
        window=cfg["features.window"],
        db_floor=cfg["features.db_floor"],
    )


def transform_spec(cfg: ExperimentConfig) -> TransformSpec:
    return TransformSpec(kind=cfg["transform.kind"], gamma=cfg["transform.gamma"])


def loss_weights(cfg: ExperimentConfig) -> LossWeights:
    return LossWeights(lam=cfg["train.lam"], beta=cfg["train.beta"],
                       gamma_w=cfg["train.gamma"])


def train_config(cfg: ExperimentConfig, **overrides) -> TrainConfig:
    kwargs = dict(
        model=cfg["train.model"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        val_interval_steps=cfg["train.val_interval_steps"],
        lr=cfg["train.lr"],
        beta1=cfg["train.beta1"],
        weights=loss_weights(cfg),
        disc_steps=cfg["train.disc_steps"],
        seed=cfg["train.seed"],
        n_source=cfg["train.n_source"],
        n_target=cfg["train.n_target"],
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def synth_spec(cfg: ExperimentConfig) -> SynthSpec:
    return SynthSpec(
        dim=cfg["synth.dim"],
        n_source=cfg["synth.n_source"],
        n_target=cfg["synth.n_target"],
        class_sep=cfg["synth.class_sep"],
        domain_shift=cfg["synth.domain_shift"],
        domain_scale=cfg["synth.domain_scale"],
        seed=cfg["synth.seed"],
    )


def split_ratios(cfg: ExperimentConfig) -> tuple[float, float, float]:
    return (cfg["data.train_ratio"], cfg["data.val_ratio"], cfg["data.test_ratio"])
