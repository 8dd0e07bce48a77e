"""Run configuration: one structured file covering every pipeline stage.

Unknown keys are rejected up front; the fully-resolved config is echoed into
every output directory so any artifact is regenerable from (config, seed).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .inference import SamplerConfig
from .model import BackboneConfig
from .simenv import SimConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    demos_per_task: int = 50
    task_names: tuple = ()  # empty = all in-distribution tasks
    seed_start: int = 0  # train demo seeds are seed_start..; eval uses eval.seed_base
    formats: tuple = ("intention", "spatial", "compact")
    horizon: int = 8
    workers: int = 0
    task_bank: str = ""  # empty = packaged default


@dataclass(frozen=True)
class LLMConfig:
    backend: str = "template"  # template | external-http
    endpoint: str = ""
    api_key_env: str = "DESKVLA_LLM_API_KEY"

    def __post_init__(self):
        if self.backend not in ("template", "external-http"):
            raise ValueError(f"unknown llm backend {self.backend!r}")
        if self.backend == "external-http" and not self.endpoint:
            raise ValueError("external-http backend needs an endpoint")


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 10
    max_steps: int = 200
    seed_base: int = 10_000
    conditions: tuple = ("direct", "intention")
    execute_horizon: int = 4
    latency_states: int = 100


@dataclass(frozen=True)
class RunConfig:
    simenv: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage="stage1"))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage="stage2"))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    num_threads: int = 4


_SECTIONS = {
    "simenv": SimConfig,
    "data": DataConfig,
    "model": BackboneConfig,
    "stage1": TrainConfig,
    "stage2": TrainConfig,
    "sampler": SamplerConfig,
    "eval": EvalConfig,
    "llm": LLMConfig,
}


class ConfigError(ValueError):
    pass


def _build_section(cls, raw: dict, path: str, forced: dict = None):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys under {path}: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    if forced:
        kwargs.update(forced)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section {path}: {e}") from e


def load_config(path=None, text=None) -> RunConfig:
    """Load and validate a YAML run configuration."""
    if text is None:
        if path is None:
            return RunConfig()
        with open(path) as f:
            text = f.read()
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top_unknown = set(raw) - set(_SECTIONS) - {"num_threads"}
    if top_unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(top_unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name} must be a mapping")
        forced = {"stage": name} if name in ("stage1", "stage2") else None
        kwargs[name] = _build_section(cls, section, name, forced)
    return RunConfig(num_threads=int(raw.get("num_threads", 4)), **kwargs)


def resolved_yaml(cfg: RunConfig) -> str:
    """Fully-resolved config echo, loadable by load_config."""
    def clean(v):
        if dataclasses.is_dataclass(v):
            return {k: clean(x) for k, x in dataclasses.asdict(v).items()}
        if isinstance(v, tuple):
            return [clean(x) for x in v]
        return v

    out = {name: clean(getattr(cfg, name)) for name in _SECTIONS}
    out["num_threads"] = cfg.num_threads
    return yaml.safe_dump(out, sort_keys=True)
