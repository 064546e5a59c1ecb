"""Run configuration: YAML ingestion, preset expansion, overrides and hashing."""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.cluster import ClusterSpec, cluster_preset
from src.config import LOSS_BLOWUP_FACTOR, OUTPUT_DIR_ENV, SAMPLE_EVERY_S, SAMPLE_EVERY_UPDATES, ShardMode
from src.engine.events import canonical_json
from src.engine.generate import StopRule
from src.errors import ConfigError
from src.params import fnv1a64
from src.strategies.base import StrategyConfig, strategy_preset
from src.workloads import WorkloadSpec

# short sweep axis names
AXIS_ALIASES = {
    "beta_g": "strategy.server.beta",
    "beta_l": "strategy.local_server.beta",
    "alpha": "strategy.merge_alpha",
    "K": "strategy.accumulation",
    "H": "strategy.local_steps",
}


class StopConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_time_s: Optional[float] = Field(default=None, gt=0.0)
    max_worker_steps: Optional[int] = Field(default=None, gt=0)
    max_samples: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _needs_budget(self) -> "StopConfig":
        if self.max_time_s is None and self.max_worker_steps is None and self.max_samples is None:
            raise ValueError("set at least one of max_time_s, max_worker_steps, max_samples")
        return self

    def rule(self, samples_per_step: int) -> StopRule:
        return StopRule(self.max_time_s, self.max_worker_steps, self.max_samples, samples_per_step)


class SamplingConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    every_s: float = Field(default=SAMPLE_EVERY_S, gt=0.0)
    every_updates: int = Field(default=SAMPLE_EVERY_UPDATES, ge=1)


class ReplayConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    parallelism: int = Field(default=1, ge=1)
    retain_snapshots: bool = False
    stop_at_loss: Optional[float] = None
    blowup_factor: Optional[float] = Field(default=LOSS_BLOWUP_FACTOR, gt=1.0)


class OutputConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dir: str = "runs"
    write_trace: bool = True
    gzip_trace: bool = False


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "run"
    seed: int = 0
    cluster: ClusterSpec
    strategy: StrategyConfig
    workload: WorkloadSpec
    shard_mode: ShardMode = ShardMode.IID
    stop: StopConfig
    target_loss: Optional[float] = None
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    replay: ReplayConfig = Field(default_factory=ReplayConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)


# ---------------------------------------------------------------------------
# Raw-tree helpers
# ---------------------------------------------------------------------------

def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _expand(raw: Any, section: str, resolve) -> Any:
    if isinstance(raw, str):
        name, overrides = raw, {}
    elif isinstance(raw, dict) and "preset" in raw:
        overrides = dict(raw)
        name = overrides.pop("preset")
    else:
        return raw
    try:
        base = resolve(name)
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from None
    return _deep_merge(base, overrides)


def _cluster_tree(name: str) -> Dict[str, Any]:
    # step time and message size are re-derived from ``model`` unless overridden
    return cluster_preset(name).model_dump(mode="json", exclude={"profiled_step_s", "message_bytes"})


def expand_presets(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Replace ``cluster``/``strategy`` preset references with their full trees."""
    tree = copy.deepcopy(raw)
    if "cluster" in tree:
        tree["cluster"] = _expand(tree["cluster"], "cluster", _cluster_tree)
    if "strategy" in tree:
        tree["strategy"] = _expand(tree["strategy"], "strategy", strategy_preset)
    return tree


def set_path(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    """Assign *value* at a dotted path; integer segments index lists."""
    dotted = AXIS_ALIASES.get(dotted, dotted)
    parts = dotted.split(".")
    node: Any = tree
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                index = int(part)
                if last:
                    node[index] = value
                else:
                    node = node[index]
            except (ValueError, IndexError):
                raise ConfigError(".".join(parts[: i + 1]), "not a valid list index") from None
            continue
        if not isinstance(node, dict):
            raise ConfigError(".".join(parts[:i]), "cannot descend into a scalar")
        if last:
            node[part] = value
        else:
            if node.get(part) is None:
                node[part] = {}
            node = node[part]


def parse_override(text: str) -> Tuple[str, Any]:
    """``a.b=value`` with the value read as a YAML scalar."""
    if "=" not in text:
        raise ConfigError(text, "override must look like dotted.path=value")
    path, raw = text.split("=", 1)
    try:
        return path.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(path.strip(), f"unreadable value: {exc}") from None


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _validation_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    path = ".".join(str(part) for part in first["loc"])
    return ConfigError(path, first["msg"])


def config_from_dict(
    raw: Dict[str, Any],
    overrides: Iterable[Union[str, Tuple[str, Any]]] = (),
    honour_env: bool = True,
) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "run config must be a mapping")
    tree = expand_presets(raw)
    for item in overrides:
        path, value = parse_override(item) if isinstance(item, str) else item
        set_path(tree, path, value)
    if honour_env and os.environ.get(OUTPUT_DIR_ENV):
        tree.setdefault("output", {})
        tree["output"]["dir"] = os.environ[OUTPUT_DIR_ENV]
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise _validation_error(exc) from None


def load_config(path: Union[str, Path], overrides: Iterable[str] = ()) -> RunConfig:
    """Read, expand and validate a YAML run config. I/O errors propagate as OSError."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    return config_from_dict(raw or {}, overrides)


def derive(config: RunConfig, changes: Dict[str, Any]) -> RunConfig:
    """A validated copy of *config* with dotted-path *changes* applied."""
    tree = config.model_dump(mode="json")
    for path, value in changes.items():
        set_path(tree, path, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise _validation_error(exc) from None


def config_hash(config: RunConfig) -> str:
    """FNV-1a 64 over the canonical config; output location and thread count are excluded."""
    body = config.model_dump(mode="json", exclude={"output": True, "replay": {"parallelism"}})
    return f"{fnv1a64(canonical_json(body).encode('ascii')):016x}"
