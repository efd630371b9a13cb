"""Run configuration: one TOML file, unknown keys rejected."""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .arch_dsl import Mode
from .bench_oracle import BENCH_SCORE_CONFIG, BenchConfig
from .generators import EndpointConfig
from .nn_eval import ScoreConfig
from .resource import ConstraintSet


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSection:
    gamma_trans: float = math.inf
    gamma_stop: float = math.inf
    pool_size: int = 5
    max_iterations: int = 200
    space: str = "catalog"


@dataclass(frozen=True)
class EndpointSection:
    base_url: str = ""
    model_explore: str = ""
    model_refine: str = ""
    temperature_explore: float = 1.0
    temperature_refine: float = 0.2
    timeout: float = 60.0
    max_retries: int = 2
    api_key: str | None = field(default=None, repr=False)


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs"
    record_timing: bool = False


@dataclass(frozen=True)
class BenchSection:
    seeds: int = 10
    pool_size: int = 5
    max_iterations: int = 200
    trans_quantile: float = 0.9
    table: str = "oracle_table.jsonl"
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: Mode = Mode.CLASSIFICATION
    generator: str = "mock"
    init: str | None = None
    score: ScoreConfig = ScoreConfig()
    search: SearchSection = SearchSection()
    constraints: ConstraintSet = ConstraintSet()
    endpoint: EndpointSection = EndpointSection()
    output: OutputSection = OutputSection()
    bench: BenchSection = BenchSection()
    bench_score: ScoreConfig = BENCH_SCORE_CONFIG
    base_dir: Path = Path(".")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def endpoint_config(self) -> EndpointConfig:
        e = self.endpoint
        return EndpointConfig.from_env(
            base_url=e.base_url,
            model_explore=e.model_explore,
            model_refine=e.model_refine,
            temperature_explore=e.temperature_explore,
            temperature_refine=e.temperature_refine,
            timeout=e.timeout,
            max_retries=e.max_retries,
            api_key=e.api_key,
        )

    def bench_config(self) -> BenchConfig:
        b = self.bench
        return BenchConfig(b.seeds, b.pool_size, b.max_iterations, b.trans_quantile)


_SECTIONS = {
    "score": ScoreConfig,
    "search": SearchSection,
    "constraints": ConstraintSet,
    "endpoint": EndpointSection,
    "output": OutputSection,
    "bench": BenchSection,
    "bench_score": ScoreConfig,
}
_TOP = {"seed", "mode", "generator", "init"}


def _section(cls, data: Any, name: str, defaults: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = dict(defaults or {})
    values.update(data)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(data: dict, base_dir: Path = Path("."), overrides: dict | None = None) -> RunConfig:
    unknown = sorted(set(data) - _TOP - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    top = {k: data[k] for k in _TOP if k in data}
    top.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        mode = Mode(top.get("mode", "classification"))
    except ValueError:
        raise ConfigError(f"mode must be 'classification' or 'detection', got {top.get('mode')!r}") from None
    if top.get("generator", "mock") not in ("mock", "llm"):
        raise ConfigError(f"generator must be 'mock' or 'llm', got {top.get('generator')!r}")
    seed = int(top.get("seed", 0))
    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        defaults = None
        if name == "score":
            defaults = {"seed": seed, "resolution": 64 if mode is Mode.DETECTION else 32}
        elif name == "bench_score":
            defaults = asdict(BENCH_SCORE_CONFIG)
        sections[name] = _section(cls, data.get(name, {}), name, defaults)
    if sections["search"].space not in ("catalog", "micro"):
        raise ConfigError("[search] space must be 'catalog' or 'micro'")
    if sections["search"].gamma_trans > sections["search"].gamma_stop:
        raise ConfigError("[search] gamma_trans must not exceed gamma_stop")
    return RunConfig(
        seed=seed,
        mode=mode,
        generator=top.get("generator", "mock"),
        init=top.get("init"),
        base_dir=base_dir,
        **sections,
    )


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, Path("."), overrides)
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path.parent, overrides)
