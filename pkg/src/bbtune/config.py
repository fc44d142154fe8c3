"""JSON experiment configs.

Every section is a strict pydantic model (unknown keys are rejected) that
converts to the dataclass its module consumes. Module-level validation runs
during parsing, so a bad value fails with the path of its section.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import ClassVar, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .estimator import EstimatorConfig
from .toyvl import TaskSpec
from .trainer import AXES, AdapterConfig, Budget, OptimizerConfig, RunSpec, Schedule


class ConfigError(ValueError):
    """A config file that cannot be parsed or fails validation."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    target: ClassVar[type | None] = None

    @model_validator(mode="after")
    def _module_checks(self):
        if self.target is not None:
            self.build()
        return self

    def build(self):
        return self.target(**self.model_dump())


class TaskModel(_Strict):
    target: ClassVar[type] = TaskSpec
    C: int = 16
    d_e: int = 16
    d_f: int = 32
    M: int = 1
    shots: int = 16
    n_test: int = 100
    sigma: float = 0.15
    shift_strength: float = 0.3
    init_offset: float = 2.0
    tau: float = 0.07
    hidden: int = 64

    @field_validator("C")
    @classmethod
    def _classes(cls, v):
        if v < 2:
            raise ValueError("classification needs >= 2 classes")
        return v

    @field_validator("sigma", "shift_strength", "init_offset")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    def build(self, seed: int = 0) -> TaskSpec:
        return TaskSpec(**self.model_dump(), seed=seed)


class ScheduleModel(_Strict):
    target: ClassVar[type] = Schedule
    variant: Literal["ALT", "P_A", "A_P", "PROMPT_ONLY", "ADAPTER_ONLY", "ZERO_SHOT"] = "ALT"
    prompt_epoch: int = 50
    adapter_epoch: int = 50
    period: int = 1
    patience: int = 3
    tol: float = 1e-4


class EstimatorModel(_Strict):
    target: ClassVar[type] = EstimatorConfig
    q: int = 256
    beta: float | None = None
    b: float | None = None


class OptimizerModel(_Strict):
    target: ClassVar[type] = OptimizerConfig
    name: Literal["adam", "sgd", "spsa_gc", "cmaes"] = "adam"
    lr: float = Field(0.01, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    spsa_a: float = Field(0.5, gt=0)
    spsa_c: float = Field(0.01, gt=0)
    spsa_A: float = Field(0.0, ge=0)
    spsa_alpha: float = Field(0.602, gt=0)
    spsa_gamma_c: float = Field(0.101, ge=0)
    spsa_momentum: float = Field(0.9, ge=0, lt=1)
    n_two_side: int = Field(5, ge=1)
    popsize: int = Field(10, ge=2)
    sigma0: float = Field(0.2, gt=0)


class AdapterModel(_Strict):
    target: ClassVar[type] = AdapterConfig
    kind: Literal["none", "mlp", "cache"] = "cache"
    alpha: float = Field(0.2, ge=0, le=1)
    lr: float = Field(0.01, gt=0)
    sigma_aug: float = Field(0.05, ge=0)
    cache_epochs: int = Field(10, ge=1)
    gamma: float = Field(5.0, gt=0)
    alpha_tip: float = Field(1.0, ge=0)
    train_keys: bool = False


class BudgetModel(_Strict):
    target: ClassVar[type] = Budget
    max_iterations: int | None = 750
    max_api_calls: int | None = None
    max_adapter_epochs: int | None = None


class AblationModel(_Strict):
    axis: Literal["q", "prompt_length", "shots", "schedule"]
    values: list[int | str] = Field(min_length=1)
    scale_q: bool = False

    @model_validator(mode="after")
    def _values_match_axis(self):
        if self.axis == "schedule":
            for v in self.values:
                Schedule(variant=str(v))
        elif not all(isinstance(v, int) and v >= 1 for v in self.values):
            raise ValueError(f"values for axis {self.axis} must be positive integers")
        return self


class BoundModel(_Strict):
    """Test function: ``0.5 x^T diag(a) x`` (smoothness ``max|a|``) or ``c^T x`` (smoothness 0)."""

    function: Literal["quadratic", "linear"] = "quadratic"
    D: int = Field(8, ge=1)
    curvature: list[float] | None = None
    point_scale: float = Field(1.0, gt=0)
    b: float | None = Field(None, gt=0)
    q_values: list[int] = Field(default_factory=lambda: [1, 8, 64], min_length=1)
    beta_values: list[float] = Field(min_length=1)
    trials: int = Field(1000, ge=2)

    @model_validator(mode="before")
    @classmethod
    def _default_betas(cls, data):
        if isinstance(data, dict) and "beta_values" not in data:
            D = data.get("D", 8)
            data = {**data, "beta_values": [1e-3, 1.0 / D, 0.1] if isinstance(D, int) and D > 0 else [0.1]}
        return data

    @model_validator(mode="after")
    def _shapes(self):
        if self.curvature is not None and len(self.curvature) != self.D:
            raise ValueError(f"curvature has {len(self.curvature)} entries, expected D={self.D}")
        if any(q < 1 for q in self.q_values) or any(not b > 0 for b in self.beta_values):
            raise ValueError("q values must be >= 1 and beta values > 0")
        return self


def _matched_budget_optimizers() -> list[OptimizerModel]:
    return [
        OptimizerModel(name="cmaes", popsize=10, sigma0=0.2),
        OptimizerModel(name="spsa_gc", n_two_side=5, spsa_a=0.5, spsa_c=0.01),
        OptimizerModel(name="adam", lr=0.005),
    ]


class ExperimentConfig(_Strict):
    task: TaskModel = Field(default_factory=TaskModel)
    task_file: str | None = None
    schedule: ScheduleModel = Field(default_factory=ScheduleModel)
    estimator: EstimatorModel = Field(default_factory=EstimatorModel)
    optimizer: OptimizerModel = Field(default_factory=OptimizerModel)
    optimizers: list[OptimizerModel] | None = None
    preset: Literal["matched_budget"] | None = None
    adapter: AdapterModel = Field(default_factory=AdapterModel)
    budget: BudgetModel = Field(default_factory=BudgetModel)
    seed: int = Field(0, ge=0)
    seeds: list[int] | None = None
    eval_every: int = Field(10, ge=1)
    feature_access: bool = True
    ablation: AblationModel | None = None
    bound: BoundModel | None = None
    out: str = "out"

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data):
        """Materialize a preset; fields given explicitly in the config win."""
        if not isinstance(data, dict) or data.get("preset") != "matched_budget":
            return data
        # 10 queries per iteration for every optimizer over 750 iterations
        data = dict(data)
        data["schedule"] = {"variant": "PROMPT_ONLY", **data.get("schedule", {})}
        data["estimator"] = {"q": 9, **data.get("estimator", {})}
        data.setdefault("budget", {"max_iterations": None, "max_api_calls": 7500})
        data.setdefault("optimizers", [o.model_dump() for o in _matched_budget_optimizers()])
        return data

    @property
    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    def run_spec(self, seed: int | None = None, optimizer: OptimizerModel | None = None) -> RunSpec:
        seed = self.seed if seed is None else seed
        return RunSpec(
            task=self.task.build(seed),
            schedule=self.schedule.build(),
            estimator=self.estimator.build(),
            optimizer=(optimizer or self.optimizer).build(),
            adapter=self.adapter.build(),
            budget=self.budget.build(),
            seed=seed,
            eval_every=self.eval_every,
            feature_access=self.feature_access,
        )

    def resolved(self) -> dict:
        """Every field with defaults filled in; the output directory is left out
        so that artifacts do not depend on where they were written."""
        return self.model_dump(mode="json", exclude={"out"})


def format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        lines.append(f"{path}: {msg}")
    return "\n".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(format_errors(err)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)


__all__ = ["AXES", "ConfigError", "ExperimentConfig", "format_errors", "load_config", "parse_config"]
