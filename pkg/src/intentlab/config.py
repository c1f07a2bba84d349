"""Experiment configuration files.

The format is one ``section.key = value`` pair per line, lines starting
with ``#`` are comments and values are JSON literals (bare words are read
as strings)::

    seed = 7
    attack.p_fake = 0.3
    defender.variant = "robust"

Omitted keys keep their defaults; unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .attack import AttackConfig
from .game import DefenderConfig
from .model import ToySpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GameSettings:
    n_games: int = 100

    def __post_init__(self):
        if self.n_games < 1:
            raise ValueError("n_games must be >= 1")


@dataclass(frozen=True)
class ModelSettings:
    spec: ToySpec = field(default_factory=ToySpec)
    seed: int = 0
    path: Optional[str] = None  # load this model file instead of training


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defender: DefenderConfig = field(default_factory=DefenderConfig)
    game: GameSettings = field(default_factory=GameSettings)
    out: Optional[str] = None
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, attack=replace(self.attack, seed=seed))


_SECTIONS = {"model": ToySpec, "attack": AttackConfig, "defender": DefenderConfig, "game": GameSettings}
_MODEL_EXTRA = ("seed", "path")
_TOP = ("seed", "out")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(cls, key, value, where):
    kinds = {f.name: f.type for f in fields(cls)}
    kind = kinds[key]
    if isinstance(value, bool) or value is None:
        ok = False
    elif kind in ("int", int):
        ok = isinstance(value, int)
    elif kind in ("float", float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif kind in ("str", str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {kind}, got {value!r}")
    return value


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    model_extra, top = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        value = _parse_value(value)
        if "." not in key:
            if key not in _TOP:
                raise ConfigError(f"{where}: unknown key {key!r}")
            top[key] = value
            continue
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        cls = _SECTIONS[section]
        if section == "model" and name in _MODEL_EXTRA:
            model_extra[name] = value
            continue
        if section == "attack" and name == "seed":
            raise ConfigError(f"{where}: set the top-level 'seed' instead of attack.seed")
        if name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"{where}: unknown key {key!r}")
        sections[section][name] = _coerce(cls, name, value, f"{where}: {key}")
    return _build(sections, model_extra, top, source)


def _build(sections, model_extra, top, source) -> ExperimentConfig:
    p_fake = sections["attack"].get("p_fake", AttackConfig.p_fake)
    if not 0.0 <= p_fake <= 0.5:
        raise ConfigError(f"{source}: attack.p_fake={p_fake} outside [0, 0.5]; the robust estimator "
                          "only bounds its bias while decoys are a minority")
    if p_fake == 0 and "fake_strategy" not in sections["attack"]:
        sections["attack"]["fake_strategy"] = "none"
    seed = top.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{source}: seed must be a non-negative integer")
    out = top.get("out")
    built = {}
    for name, cls in _SECTIONS.items():
        try:
            kwargs = dict(sections[name])
            if name == "attack":
                kwargs["seed"] = seed
            built[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    mseed = model_extra.get("seed", 0)
    mpath = model_extra.get("path")
    if isinstance(mseed, bool) or not isinstance(mseed, int):
        raise ConfigError(f"{source}: model.seed must be an integer")
    if mpath is not None and not isinstance(mpath, str):
        raise ConfigError(f"{source}: model.path must be a string")
    return ExperimentConfig(ModelSettings(built["model"], mseed, mpath), built["attack"], built["defender"],
                            built["game"], out, seed)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def serialize_config(config: ExperimentConfig) -> str:
    """Full listing of every key; parsing it back gives an equal config."""
    lines = [f"seed = {json.dumps(config.seed)}"]
    if config.out is not None:
        lines.append(f"out = {json.dumps(config.out)}")
    lines.append(f"model.seed = {json.dumps(config.model.seed)}")
    if config.model.path is not None:
        lines.append(f"model.path = {json.dumps(config.model.path)}")
    parts = {"model": config.model.spec, "attack": config.attack, "defender": config.defender,
             "game": config.game}
    for section, obj in parts.items():
        for key, value in asdict(obj).items():
            if section == "attack" and key == "seed":
                continue
            lines.append(f"{section}.{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()
