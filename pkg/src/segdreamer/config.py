"""Run configuration: nested dataclasses, YAML round-trip and dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from segdreamer.agent import AgentConfig
from segdreamer.envsim import EnvConfig
from segdreamer.errors import ConfigError
from segdreamer.masks import MaskProviderConfig
from segdreamer.worldmodel import WorldModelConfig

# env steps count simulator substeps, so one decision step = action_repeat env steps
DEFAULT_BUDGETS = {"dot_reacher": 50_000, "pixel_pendulum": 100_000}

# Distractor seeds: training episodes draw from [0, TRAIN_DISTRACTOR_SEEDS); evaluation uses
# seeds from EVAL_DISTRACTOR_OFFSET upward, so the two ranges never meet.
TRAIN_DISTRACTOR_SEEDS = 100
EVAL_DISTRACTOR_OFFSET = 1_000_000


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    masks: MaskProviderConfig = field(default_factory=MaskProviderConfig)
    model: WorldModelConfig = field(default_factory=WorldModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    total_env_steps: int = 50_000
    batch_size: int = 16
    seq_len: int = 64
    train_ratio: float = 0.5
    prefill_steps: int = 2_500
    replay_capacity: int = 1_000_000
    eval_every: int = 10_000
    eval_episodes: int = 10
    log_every: int = 1_000
    train_distractor_seeds: int = TRAIN_DISTRACTOR_SEEDS
    eval_distractor_offset: int = EVAL_DISTRACTOR_OFFSET
    threaded: bool = False
    label: str = ""
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.env.validate()
        self.masks.validate()
        self.model.validate()
        self.agent.validate()
        if self.seq_len < 2:
            raise ConfigError(f"seq_len: must be >= 2, got {self.seq_len}")
        if self.eval_episodes < 1:
            raise ConfigError(f"eval_episodes: must be >= 1, got {self.eval_episodes}")
        for name in ("total_env_steps", "prefill_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        for name in ("batch_size", "eval_every", "log_every", "train_distractor_seeds", "replay_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.train_ratio < 0:
            raise ConfigError(f"train_ratio: must be >= 0, got {self.train_ratio}")
        if self.eval_distractor_offset < self.train_distractor_seeds:
            raise ConfigError("eval_distractor_offset: evaluation distractor seeds overlap the training range")
        return self

    @property
    def name(self) -> str:
        return self.label or self.model.variant

    def train_distractor_range(self) -> range:
        return range(0, self.train_distractor_seeds)

    def eval_distractor_range(self) -> range:
        return range(self.eval_distractor_offset, self.eval_distractor_offset + 10 * max(self.eval_episodes, 1000))


def to_dict(config) -> dict:
    return dataclasses.asdict(config)


def from_dict(data: Mapping[str, Any], cls=RunConfig, path: str = ""):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"{where}: unknown configuration key")
        ftype = fields[key].type
        sub = _NESTED.get(key) if cls is RunConfig else None
        if sub is not None:
            kwargs[key] = from_dict(value, sub, where)
        else:
            kwargs[key] = _coerce(value, ftype, where)
    return cls(**kwargs)


_NESTED = {"env": EnvConfig, "masks": MaskProviderConfig, "model": WorldModelConfig, "agent": AgentConfig}


def _coerce(value, ftype, where: str):
    name = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if name == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if name == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if name == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if name == "str":
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot interpret {value!r} as {name}") from None
    return value


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a nested dict; values are parsed as YAML scalars."""
    valid = to_dict(RunConfig())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node, ref = data, valid
        for i, part in enumerate(parts):
            if not isinstance(ref, dict) or part not in ref:
                raise ConfigError(f"{key}: unknown configuration path")
            if i == len(parts) - 1:
                if isinstance(ref[part], dict):
                    raise ConfigError(f"{key}: is a section, not a value")
                node[part] = yaml.safe_load(raw)
            else:
                node = node.setdefault(part, {})
                ref = ref[part]
    return data


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    data = apply_overrides(data, overrides)
    return from_dict(data).validate()


def save_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(to_dict(config), f, sort_keys=False)
    return path
