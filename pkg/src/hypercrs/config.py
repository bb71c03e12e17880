"""Run configuration: flat ``key = value`` files with dotted section prefixes and CLI overrides.

Example::

    seed = 3
    world.n_items = 200
    env.max_turns = 15
    reward.ask_fail = -0.1
    train.episodes = 1000
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .env import EnvConfig, Rewards
from .policy import TrainConfig
from .world import WorldSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KGConfig:
    epochs: int = 100
    lr: float = 0.01
    margin: float = 1.0
    batch_size: int = 256


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 500
    policies: tuple[str, ...] = ("random", "abs_greedy", "max_entropy", "learned")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    world_dir: str = ""
    world: WorldSpec = field(default_factory=WorldSpec)
    kg: KGConfig = field(default_factory=KGConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> dict:
        return asdict(self)


SECTIONS = {"world": "world", "kg": "kg", "env": "env", "reward": "env.rewards", "train": "train", "eval": "eval"}


def _coerce(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in text.split(",") if s.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def _set_path(obj, path: list[str], raw: str, key: str):
    name = path[0]
    names = {f.name for f in fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    if len(path) == 1:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key} is a section, not a value")
        return replace(obj, **{name: _coerce(raw, current, key)})
    return replace(obj, **{name: _set_path(current, path[1:], raw, key)})


def apply_overrides(config: RunConfig, pairs) -> RunConfig:
    """Apply ``(key, value)`` string pairs; keys are ``name`` or ``section.name``."""
    for key, raw in pairs:
        parts = key.strip().split(".")
        if len(parts) == 2 and parts[0] in SECTIONS:
            path = SECTIONS[parts[0]].split(".") + [parts[1]]
        elif len(parts) == 1:
            path = parts
        else:
            raise ConfigError(f"unknown config key {key!r}")
        config = _set_path(config, path, raw, key)
    return config


def parse_config_text(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    config = RunConfig()
    pairs = []
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        pairs += parse_config_text(p.read_text(encoding="utf-8"), str(p))
    pairs += list(overrides)
    # the master seed feeds every stage that was not given its own seed
    keys = {k for k, _ in pairs}
    master = [v for k, v in pairs if k == "seed"]
    if master:
        pairs += [(k, master[-1]) for k in ("world.seed", "train.seed") if k not in keys]
    config = apply_overrides(config, pairs)
    config.world.validate()
    config.train.validate()
    if config.env.max_turns < 1 or config.env.rec_size < 1 or config.env.ask_size < 1:
        raise ConfigError("env.max_turns, env.rec_size and env.ask_size must be >= 1")
    return config


def write_manifest(config: RunConfig, path, command: str, extra: dict | None = None) -> None:
    data = {"command": command, "config": config.to_json()}
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = ["RunConfig", "KGConfig", "EvalConfig", "ConfigError", "load_config", "apply_overrides",
           "parse_config_text", "write_manifest", "EnvConfig", "Rewards", "TrainConfig", "WorldSpec"]
