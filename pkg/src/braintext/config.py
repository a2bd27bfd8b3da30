"""Run configuration: one JSON file, versioned schema, strict keys.

Every tunable in the pipeline lives here. Defaults carry the reference
hyperparameters (two phases 20/2 epochs at lr 1e-3/2e-5, batch 5, adapter
rank 16 alpha 16, min-p 0.2 with 2 beams); world and decoder sizes are the
desk-scale values. Unknown keys are rejected so typos cannot silently
revert a setting to its default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass

from .decoding import GenerationConfig
from .experiments import DEFAULT_BETA_GRID
from .training import PhaseConfig, default_lm_phase, default_phase1, default_phase2
from .world import WorldConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DecoderSettings:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 160
    ln_eps: float = 1e-5


@dataclass
class TokenizerSettings:
    hidden: int = 32
    variance_target: float = 0.95


@dataclass
class LoraSettings:
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.05


@dataclass
class ExperimentSettings:
    beta_grid: list[float] = field(default_factory=lambda: list(DEFAULT_BETA_GRID))
    mask_fractions: list[float] = field(default_factory=lambda: [0.01, 0.05])
    stim_trials_per_group: int = 20
    holdout_categories: list[str] = field(
        default_factory=lambda: ["zebra", "surfer", "airplane"]
    )
    n_baseline_permutations: int = 200


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    out_dir: str = "runs/demo"
    position_jitter: int = 24
    world: WorldConfig = field(default_factory=WorldConfig)
    decoder: DecoderSettings = field(default_factory=DecoderSettings)
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    lora: LoraSettings = field(default_factory=LoraSettings)
    lm: PhaseConfig = field(default_factory=default_lm_phase)
    phase1: PhaseConfig = field(default_factory=default_phase1)
    phase2: PhaseConfig = field(default_factory=default_phase2)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    experiments: ExperimentSettings = field(default_factory=ExperimentSettings)

    def validate(self) -> "RunConfig":
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(
                f"config_version {self.config_version} unsupported, expected {CONFIG_VERSION}"
            )
        self.world.validate()
        for phase in (self.lm, self.phase1, self.phase2):
            phase.validate()
        self.generation.validate()
        if self.lora.rank < 1 or self.lora.alpha <= 0:
            raise ConfigError("lora rank must be >= 1 and alpha > 0")
        if not 0 <= self.lora.dropout < 1:
            raise ConfigError("lora dropout must lie in [0, 1)")
        if self.position_jitter < 0:
            raise ConfigError("position_jitter must be nonnegative")
        return self


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path or 'config'}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        # annotations are strings here; resolve nesting via the default value
        probe = _default_of(cls, key)
        if is_dataclass(probe.__class__) and isinstance(value, dict):
            kwargs[key] = _from_dict(probe.__class__, value, sub)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad section {path or 'config'}: {e}") from e


def _default_of(cls, key):
    for f in fields(cls):
        if f.name == key:
            if f.default is not dataclasses.MISSING:
                return f.default
            if f.default_factory is not dataclasses.MISSING:
                return f.default_factory()
            return None  # required scalar field; value passes through as-is
    raise KeyError(key)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "").validate()


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    return config_from_dict(data)


def save_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
        f.write("\n")


def format_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply key=value pairs with dotted paths, e.g. world.n_trials=200."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config path {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config path {key!r}")
        node[parts[-1]] = _parse_scalar(raw.strip())
    return config_from_dict(data)
