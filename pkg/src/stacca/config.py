"""Experiment configuration: TOML files, dotted ``--set`` overrides and a
resolved dump with every default filled in."""

from __future__ import annotations

import dataclasses
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from stacca.env import ConfigError, EnvConfig, RewardConfig
from stacca.graph import GraphSpec, InvalidSpecError
from stacca.models import ModelConfig
from stacca.train import TrainConfig, derived_graph_seed

OUTPUT_ENV_VAR = "STACCA_OUT"


@dataclass(frozen=True)
class ExperimentConfig:
    graph: GraphSpec
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"
    run_name: str = "run"

    @property
    def run_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ENV_VAR) or self.output_dir
        return Path(root) / self.run_name


# -- parsing ------------------------------------------------------------------

_SECTIONS = {
    "graph": GraphSpec,
    "env": EnvConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}
_TOP_LEVEL = ("output_dir", "run_name")


def parse_value(text: str) -> Any:
    """A TOML literal (``3``, ``0.5``, ``true``, ``"x"``); bare words are strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    tree = _deep_copy(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form dotted.path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key")
        node = tree
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r}: {k!r} is not a table")
        node[keys[-1]] = parse_value(raw.strip())
    return tree


def _deep_copy(tree: dict) -> dict:
    return {k: _deep_copy(v) if isinstance(v, dict) else v for k, v in tree.items()}


def _check_keys(table: dict, cls, where: str) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    for k in table:
        if k not in names:
            raise ConfigError(f"unknown config key {where}.{k}")


def build_section(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be a table")
    _check_keys(table, cls, where)
    try:
        return cls(**table)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from err


def from_tree(tree: dict) -> ExperimentConfig:
    for k in tree:
        if k not in _SECTIONS and k not in _TOP_LEVEL:
            raise ConfigError(f"unknown config key {k}")
    if "graph" not in tree:
        raise ConfigError("missing [graph] section")
    env_tab = dict(tree.get("env", {}))
    reward_tab = env_tab.pop("reward", None)
    graph_tab = dict(tree["graph"])
    train = build_section(TrainConfig, tree.get("train", {}), "train")
    if graph_tab.get("seed") is None:
        graph_tab["seed"] = derived_graph_seed(train.seed)
    graph = build_section(GraphSpec, graph_tab, "graph")
    env = build_section(EnvConfig, env_tab, "env")
    if reward_tab is not None:
        base = dataclasses.asdict(RewardConfig.default_for(env.kind))
        _check_keys(reward_tab, RewardConfig, "env.reward")
        env = dataclasses.replace(env, reward=RewardConfig(**{**base, **reward_tab}))
    model = build_section(ModelConfig, tree.get("model", {}), "model")
    cfg = ExperimentConfig(
        graph=graph,
        env=env,
        model=model,
        train=train,
        output_dir=str(tree.get("output_dir", "runs")),
        run_name=str(tree.get("run_name", "run")),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.graph.validate()
        cfg.env.validate(cfg.graph.num_nodes)
        cfg.model.validate()
        cfg.train.validate()
    except (InvalidSpecError, ConfigError):
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if cfg.env.kind == "rumor" and cfg.env.reward.eradication_bonus != 0.0:
        raise ConfigError("env.reward.eradication_bonus only applies to the epidemic")


def load_tree(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err


def load_config(path: str | os.PathLike | None, overrides: list[str] = ()) -> ExperimentConfig:
    tree = load_tree(path) if path is not None else {}
    return from_tree(apply_overrides(tree, list(overrides)))


# -- dumping ------------------------------------------------------------------


def to_tree(cfg: ExperimentConfig) -> dict:
    return {
        "output_dir": cfg.output_dir,
        "run_name": cfg.run_name,
        "graph": dataclasses.asdict(cfg.graph),
        "env": dataclasses.asdict(cfg.env),
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
    }


def _literal(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ConfigError(f"cannot write non-finite value {v} to TOML")
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_literal(x) for x in v) + "]"
    raise ConfigError(f"cannot write {type(v).__name__} to TOML")


def dumps(tree: dict, prefix: str = "") -> str:
    """TOML text for a tree of scalars and tables (``None`` values omitted)."""
    lines = [f"{k} = {_literal(v)}" for k, v in tree.items()
             if not isinstance(v, dict) and v is not None]
    out = "\n".join(lines) + ("\n" if lines else "")
    for k, v in tree.items():
        if isinstance(v, dict):
            name = f"{prefix}.{k}" if prefix else k
            out += f"\n[{name}]\n" + dumps(v, name).lstrip("\n")
    return out


def resolved_text(cfg: ExperimentConfig) -> str:
    return dumps(to_tree(cfg))
