"""Run configuration: one JSON document, strict keys, defaults everywhere.

Unknown keys are rejected with every offending key listed in one pass, and
the effective (post-default, post-override) config is echoed verbatim into
the run directory so any run is reproducible from its artifacts alone.
Precedence: command-line flag > config file > default.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .detector import DetectorConfig
from .hypernet import HypernetConfig
from .train import MetaConfig, PretrainConfig, TrainConfig

SEED_ENV_VAR = "SYLPH_SEED"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class EvalConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_dets: int = 100
    runs: int = 5
    enroll_shots: int = 10
    split: str = "eval"


@dataclass
class PathsConfig:
    data: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    hypernet: HypernetConfig = field(default_factory=HypernetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _coerce(value, hint, path: str, problems: list[str]):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        return _coerce(value, non_none[0], path, problems)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected an object")
            return None
        return _from_dict(hint, value, path, problems)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{path}: expected a list")
            return None
        elem = args[0] if args else float
        return tuple(_coerce(v, elem, f"{path}[{i}]", problems) for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected a boolean, got {value!r}")
            return value
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
            return value
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _from_dict(cls, data: dict, path: str, problems: list[str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"unknown key {path + '.' if path else ''}{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub_path = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub_path, problems)
        # else keep the dataclass default
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or cls.__name__}: {exc}")
        return None


def config_from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    cfg = _from_dict(RunConfig, data, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Dotted-path overrides (flag > file), e.g. {"train.meta.lr": 1e-3}."""
    problems: list[str] = []
    for dotted, value in overrides.items():
        if value is None:
            continue
        obj = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        leaf = parts[-1]
        if not hasattr(obj, leaf):
            problems.append(f"unknown key {dotted}")
            continue
        hints = typing.get_type_hints(type(obj))
        setattr(obj, leaf, _coerce(value, hints[leaf], dotted, problems))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, object] | None = None,
                env: dict | None = None) -> RunConfig:
    """File (optional) + overrides + SYLPH_SEED environment override."""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file {p} does not exist"])
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {p}: invalid JSON: {exc}"]) from exc
        cfg = config_from_dict(data)
    else:
        cfg = RunConfig()
    if overrides:
        apply_overrides(cfg, overrides)
    env = os.environ if env is None else env
    if SEED_ENV_VAR in env:
        try:
            cfg.seed = int(env[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError([f"{SEED_ENV_VAR} must be an integer"]) from exc
    cfg.train.validate()
    return cfg


def effective_config_json(cfg: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=1, sort_keys=True)


def write_effective_config(cfg: RunConfig, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.json"
    out.write_text(effective_config_json(cfg))
    return out
