"""Campaign configuration file (YAML or JSON).

Example::

    name: ishigami
    parameters:
      - {name: x1, distribution: {kind: uniform, lo: -3.14159, hi: 3.14159}}
      - {name: x2, distribution: {kind: uniform, lo: -3.14159, hi: 3.14159}}
      - {name: x3, distribution: {kind: uniform, lo: -3.14159, hi: 3.14159}}
    sampler: {kind: saltelli, n: 1024}
    executor: {endpoint: "http://127.0.0.1:8080/", max_load: 256}
    worker: {model: ishigami, params: {a: 7, b: 0.1}}
"""

from __future__ import annotations

import os
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .campaign import Normal, ParameterSpec, Uniform
from .executor import Backoff, ExecutorConfig
from .models import BUILTIN_MODELS, BuiltInModel, SubprocessModel
from .worker import MockCloudConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class UniformCfg(_Strict):
    kind: Literal["uniform"]
    lo: float
    hi: float


class NormalCfg(_Strict):
    kind: Literal["normal"]
    mean: float
    stddev: float


class ParameterCfg(_Strict):
    name: str
    distribution: Annotated[Union[UniformCfg, NormalCfg], Field(discriminator="kind")]
    default: float | None = None
    vary: bool = True

    def spec(self) -> ParameterSpec:
        d = self.distribution
        dist = Uniform(d.lo, d.hi) if isinstance(d, UniformCfg) else Normal(d.mean, d.stddev)
        return ParameterSpec(self.name, dist, self.default)


class SaltelliCfg(_Strict):
    kind: Literal["saltelli"]
    n: int = Field(gt=0)
    skip: int = Field(default=1, ge=0)


class MonteCarloCfg(_Strict):
    kind: Literal["monte_carlo"]
    n: int = Field(gt=0)
    seed: int | None = 0


class CollocationCfg(_Strict):
    kind: Literal["collocation"]
    order: int = Field(ge=1)


class PerturbationCfg(_Strict):
    kind: Literal["perturbation"]
    rel_step: float = Field(gt=0)
    reference: dict[str, float] | None = None


SamplerCfg = Annotated[
    Union[SaltelliCfg, MonteCarloCfg, CollocationCfg, PerturbationCfg], Field(discriminator="kind")
]


class BackoffCfg(_Strict):
    initial_ms: float = 100.0
    multiplier: float = 2.0
    max_ms: float = 5000.0
    jitter: float = 0.0


class ExecutorCfg(_Strict):
    endpoint: str | None = None
    max_load: int = Field(default=256, ge=1)
    timeout_ms: int = Field(default=30_000, gt=0)
    max_retries: int = Field(default=3, ge=0)
    backoff: BackoffCfg = BackoffCfg()
    seed: int | None = None

    def build(self, endpoint: str | None = None, **overrides) -> ExecutorConfig:
        url = endpoint or self.endpoint
        if not url:
            raise ConfigError("no endpoint given (use --endpoint or executor.endpoint)")
        kw = dict(
            max_load=self.max_load,
            request_timeout_ms=self.timeout_ms,
            max_retries=self.max_retries,
            backoff=Backoff(**self.backoff.model_dump()),
            seed=self.seed,
        )
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return ExecutorConfig(url, **kw)


class WorkerCfg(_Strict):
    model: Literal["ishigami", "linear", "sleep", "subprocess"] = "ishigami"
    params: dict = {}
    delay_ms: float = 0.0
    command: list[str] | None = None
    timeout_s: float | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.model == "subprocess" and not self.command:
            raise ValueError("subprocess model needs a command")
        return self

    def adapter(self):
        if self.model == "subprocess":
            return SubprocessModel(self.command, self.timeout_s)
        return BuiltInModel(self.model, self.params, self.delay_ms)


class MockCfg(_Strict):
    cold_start_ms: float = 0.0
    max_instances: int = 1000
    instance_concurrency: int = 1
    idle_reclaim_ms: float = 60_000.0
    failure_rate: float = 0.0
    throttle_status: int = 429
    provision_fraction: float = 1.0
    queue_when_full: bool = False
    seed: int | None = None

    def build(self) -> MockCloudConfig:
        return MockCloudConfig(**self.model_dump())


class CampaignConfigFile(_Strict):
    name: str = "campaign"
    parameters: list[ParameterCfg]
    sampler: SamplerCfg
    executor: ExecutorCfg = ExecutorCfg()
    worker: WorkerCfg = WorkerCfg()
    mock: MockCfg = MockCfg()

    @model_validator(mode="after")
    def _check(self):
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if not any(p.vary for p in self.parameters):
            raise ValueError("at least one parameter must vary")
        for p in self.parameters:
            p.spec()  # distribution and default checks
        return self

    def specs(self) -> list[ParameterSpec]:
        return [p.spec() for p in self.parameters]

    @property
    def varied_names(self) -> list[str]:
        return [p.name for p in self.parameters if p.vary]


def parse_config(data: dict) -> CampaignConfigFile:
    try:
        return CampaignConfigFile.model_validate(data)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike) -> CampaignConfigFile:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


__all__ = ["BUILTIN_MODELS", "CampaignConfigFile", "ConfigError", "load_config", "parse_config"]
