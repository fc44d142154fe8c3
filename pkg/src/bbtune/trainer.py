"""The collaborative tuning loop.

A run alternates (or sequences) two kinds of epochs:

* prompt epochs: ``prompt_epoch`` black-box iterations, each one optimizer
  step driven only by loss queries;
* adapter epochs: ``adapter_epoch`` full-gradient steps on the adapter,
  using features from the feature oracle and no loss queries.

The harness itself is white-box: it evaluates test accuracy and the
normalized loss from the task directly, outside of any ledger.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapters import (
    AdapterTrainConfig, AdapterTrainer, CacheAdapter, MlpAdapter, adapted_logits, build_cache,
    cache_adapter_logits, mlp_adapter_forward_many,
)
from .core import RngStream
from .estimator import EstimatorConfig
from .oracle import CapabilityError, QueryLedger
from .optim import CmaEsDriver, EstimatedGradientDriver, SpsaGcDriver
from .toyvl import Task, TaskSpec, ToyFeatureOracle, batch_loss_many, generate_task, normalized_loss, prompt_loss_oracle

VARIANTS = ("ALT", "P_A", "A_P", "PROMPT_ONLY", "ADAPTER_ONLY", "ZERO_SHOT")
OPTIMIZERS = ("adam", "sgd", "spsa_gc", "cmaes")
ADAPTERS = ("none", "mlp", "cache")

# fork keys for the run's random streams
_PROMPT_STREAM, _ADAPTER_STREAM = 1, 2


@dataclass(frozen=True)
class Schedule:
    variant: str = "ALT"
    prompt_epoch: int = 50
    adapter_epoch: int = 50
    period: int = 1
    patience: int = 3
    tol: float = 1e-4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown schedule {self.variant!r}; expected one of {VARIANTS}")
        if min(self.prompt_epoch, self.adapter_epoch, self.period, self.patience) < 1:
            raise ValueError("epoch lengths, period and patience must be >= 1")

    @property
    def uses_prompt(self) -> bool:
        return self.variant in ("ALT", "P_A", "A_P", "PROMPT_ONLY")

    @property
    def uses_adapter(self) -> bool:
        return self.variant in ("ALT", "P_A", "A_P", "ADAPTER_ONLY")


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    spsa_a: float = 0.5
    spsa_c: float = 0.01
    spsa_A: float = 0.0
    spsa_alpha: float = 0.602
    spsa_gamma_c: float = 0.101
    spsa_momentum: float = 0.9
    n_two_side: int = 5
    popsize: int = 10
    sigma0: float = 0.2

    def __post_init__(self):
        if self.name not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.name!r}; expected one of {OPTIMIZERS}")

    def driver(self, theta0: np.ndarray, est: EstimatorConfig):
        dim = theta0.size
        if self.name in ("adam", "sgd"):
            return EstimatedGradientDriver(dim, est, self.name, self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps) \
                if self.name == "adam" else EstimatedGradientDriver(dim, est, "sgd", self.lr)
        if self.name == "spsa_gc":
            return SpsaGcDriver(dim, gamma=self.spsa_momentum, a=self.spsa_a, c=self.spsa_c, A=self.spsa_A,
                                alpha=self.spsa_alpha, gamma_c=self.spsa_gamma_c, n_two_side=self.n_two_side)
        return CmaEsDriver(theta0, self.sigma0, self.popsize)


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "cache"
    alpha: float = 0.2
    lr: float = 0.01
    sigma_aug: float = 0.05
    cache_epochs: int = 10
    gamma: float = 5.0
    alpha_tip: float = 1.0
    train_keys: bool = False

    def __post_init__(self):
        if self.kind not in ADAPTERS:
            raise ValueError(f"unknown adapter {self.kind!r}; expected one of {ADAPTERS}")


@dataclass(frozen=True)
class Budget:
    """Caps on prompt iterations and/or loss queries (at least one is required)."""

    max_iterations: int | None = 750
    max_api_calls: int | None = None
    max_adapter_epochs: int | None = None

    def __post_init__(self):
        if self.max_iterations is None and self.max_api_calls is None:
            raise ValueError("budget needs max_iterations or max_api_calls")
        for v in (self.max_iterations, self.max_api_calls, self.max_adapter_epochs):
            if v is not None and v < 1:
                raise ValueError("budget caps must be > 0")


@dataclass
class RunRecord:
    iter: int
    phase: str
    train_loss: float
    normalized_loss: float | None
    test_accuracy: float | None
    api_calls_cum: int
    wall_ms: int


@dataclass
class RunResult:
    prompt: np.ndarray
    adapter: MlpAdapter | CacheAdapter | None
    records: list[RunRecord]
    ledger: QueryLedger
    final_accuracy: float
    final_loss: float

    @property
    def api_calls(self) -> int:
        return self.ledger.total_queries

    def checkpoints(self) -> list[RunRecord]:
        return [r for r in self.records if r.test_accuracy is not None]


def evaluate(task: Task, prompt: np.ndarray, adapter=None, split: str = "test") -> float:
    """Fraction of ``split`` samples whose argmax prediction matches the label."""
    feats, labels = task.data.split(split)
    return _accuracy(task, prompt, adapter, feats, labels)


def _accuracy(task: Task, prompt, adapter, feats, labels) -> float:
    T = task.model.text_features(prompt)
    logits = adapted_logits(adapter, feats, T, task.model.tau)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _train_loss(task: Task, prompt, adapter) -> float:
    x, y = task.data.train_x, task.data.train_y
    if adapter is None:
        return float(batch_loss_many(task.model, prompt[None], x, y)[0])
    if isinstance(adapter, MlpAdapter):
        return float(batch_loss_many(task.model, prompt[None], mlp_adapter_forward_many(adapter, x)[0], y)[0])
    return float(batch_loss_many(task.model, prompt[None], x, y, _cache_extra(adapter, x))[0])


def _cache_extra(cache: CacheAdapter, x: np.ndarray) -> np.ndarray:
    zeros = np.zeros((len(x), cache.labels_onehot.shape[1]))
    return cache_adapter_logits(cache, x, zeros, exclude_self=cache.self_match)


class _Run:
    """Mutable state of one call to :func:`run`."""

    def __init__(self, task, schedule, est, opt, adapter_cfg, budget, rng, eval_every, feature_access):
        self.task, self.schedule, self.est, self.budget = task, schedule, est, budget
        self.eval_every = eval_every
        self.ledger = QueryLedger()
        self.features = ToyFeatureOracle(task) if feature_access else None
        self.rng = rng
        self.theta = task.theta0.copy()
        self.driver = opt.driver(self.theta, est) if schedule.uses_prompt else None
        self.adapter = None
        self.adapter_trainer = None
        if schedule.uses_adapter:
            if adapter_cfg.kind == "none":
                raise ValueError(f"schedule {schedule.variant} needs an adapter (kind 'mlp' or 'cache')")
            if self.features is None:
                raise CapabilityError(f"schedule {schedule.variant} needs feature access; the oracle is prompt-only")
            arng = rng.fork(_ADAPTER_STREAM)
            if adapter_cfg.kind == "mlp":
                self.adapter = MlpAdapter.init(task.model.d_f, arng, adapter_cfg.alpha)
            else:
                x, y = self.features.encode_images("train")
                self.adapter = build_cache(x, y, task.model.C, adapter_cfg.sigma_aug, adapter_cfg.cache_epochs, arng,
                                           adapter_cfg.gamma, adapter_cfg.alpha_tip)
            self.adapter_trainer = AdapterTrainer(AdapterTrainConfig(adapter_cfg.lr, schedule.adapter_epoch, adapter_cfg.train_keys))
        self.records: list[RunRecord] = []
        self.step = 0
        self.prompt_iters = 0
        self.adapter_epochs = 0
        self.exhausted = False
        self.t0 = time.perf_counter()

    # -- bookkeeping --------------------------------------------------------

    def _record(self, phase: str, loss: float, evaluate_now: bool):
        acc = nl = None
        if evaluate_now:
            acc = evaluate(self.task, self.theta, self.adapter)
            nl = normalized_loss(self.task.model, self.theta, self.task.theta0, self.task.data.train_x, self.task.data.train_y)
        self.records.append(RunRecord(self.step, phase, float(loss), nl, acc, self.ledger.total_queries,
                                      int((time.perf_counter() - self.t0) * 1000)))
        self.step += 1

    def _mark_boundary(self):
        """Make sure the last record carries an evaluation."""
        if self.records and self.records[-1].test_accuracy is None:
            r = self.records[-1]
            r.test_accuracy = evaluate(self.task, self.theta, self.adapter)
            r.normalized_loss = normalized_loss(self.task.model, self.theta, self.task.theta0,
                                                self.task.data.train_x, self.task.data.train_y)

    def _can_afford(self) -> bool:
        b = self.budget
        if b.max_iterations is not None and self.prompt_iters >= b.max_iterations:
            return False
        if b.max_api_calls is not None:
            cost = self.driver.queries_per_step(self.theta.size)
            if self.ledger.total_queries + cost > b.max_api_calls:
                return False
        return True

    def max_adapter_epochs(self) -> int:
        if self.budget.max_adapter_epochs is not None:
            return self.budget.max_adapter_epochs
        if self.budget.max_iterations is not None:
            return math.ceil(self.budget.max_iterations / self.schedule.prompt_epoch)
        per_iter = self.driver.queries_per_step(self.theta.size) if self.driver is not None else 1
        return math.ceil(self.budget.max_api_calls / per_iter / self.schedule.prompt_epoch)

    # -- phases ---------------------------------------------------------------

    def prompt_oracle(self):
        x, y = self.task.data.train_x, self.task.data.train_y
        if isinstance(self.adapter, MlpAdapter):
            x = mlp_adapter_forward_many(self.adapter, x)[0]
            return prompt_loss_oracle(self.task.model, x, y, ledger=self.ledger)
        if isinstance(self.adapter, CacheAdapter):
            return prompt_loss_oracle(self.task.model, x, y, _cache_extra(self.adapter, x), ledger=self.ledger)
        return prompt_loss_oracle(self.task.model, x, y, ledger=self.ledger)

    def prompt_epoch(self) -> float | None:
        """Returns the last observed loss, or ``None`` if the budget allowed no step."""
        if self.exhausted or not self._can_afford():
            self.exhausted = True
            return None
        oracle = self.prompt_oracle()
        prng = self.rng.fork(_PROMPT_STREAM)
        last = None
        for _ in range(self.schedule.prompt_epoch):
            if not self._can_afford():
                self.exhausted = True
                break
            self.prompt_iters += 1
            k = self.prompt_iters
            self.theta, last = self.driver.step(oracle, self.theta, k, prng.fork(k))
            self._record("prompt", last, k % self.eval_every == 0)
        self._mark_boundary()
        return last

    def adapter_epoch(self) -> float:
        T = self.features.text_features(self.theta)
        losses = []
        self.adapter = self.adapter_trainer.train(
            self.adapter, self.features, T, self.task.model.tau,
            on_step=lambda k, loss: (losses.append(loss), self._record("adapter", loss, False)),
        )
        self.adapter_epochs += 1
        self._mark_boundary()
        return losses[-1] if losses else float("nan")

    def until_converged(self, epoch_fn, max_epochs: int | None) -> None:
        best, wait, n = math.inf, 0, 0
        while max_epochs is None or n < max_epochs:
            loss = epoch_fn()
            if loss is None:
                break
            n += 1
            if loss < best - self.schedule.tol:
                best, wait = loss, 0
            else:
                wait += 1
                if wait >= self.schedule.patience:
                    break

    def execute(self):
        s = self.schedule
        v = s.variant
        if v == "ZERO_SHOT":
            self._record("prompt", _train_loss(self.task, self.theta, None), True)
        elif v == "PROMPT_ONLY":
            while self.prompt_epoch() is not None:
                pass
        elif v == "ADAPTER_ONLY":
            for _ in range(self.max_adapter_epochs()):
                self.adapter_epoch()
        elif v == "ALT":
            max_ad = self.max_adapter_epochs()
            while not self.exhausted:
                ran = False
                for _ in range(s.period):
                    ran = (self.prompt_epoch() is not None) or ran
                if not ran:
                    break
                for _ in range(s.period):
                    if self.adapter_epochs < max_ad:
                        self.adapter_epoch()
        elif v == "P_A":
            self.until_converged(self.prompt_epoch, None)
            self.until_converged(self.adapter_epoch, self.max_adapter_epochs())
        elif v == "A_P":
            self.until_converged(self.adapter_epoch, self.max_adapter_epochs())
            self.until_converged(self.prompt_epoch, None)
        self._mark_boundary()
        return RunResult(self.theta, self.adapter, self.records, self.ledger,
                         evaluate(self.task, self.theta, self.adapter),
                         _train_loss(self.task, self.theta, self.adapter))


def run(
    task: Task,
    schedule: Schedule,
    est: EstimatorConfig,
    opt: OptimizerConfig,
    adapter_cfg: AdapterConfig,
    budget: Budget,
    rng: RngStream,
    eval_every: int = 10,
    feature_access: bool = True,
) -> RunResult:
    """Execute one schedule on one task.

    ``feature_access=False`` runs in strict black-box mode, where schedules
    that train an adapter fail with :class:`CapabilityError`.
    """
    return _Run(task, schedule, est, opt, adapter_cfg, budget, rng, eval_every, feature_access).execute()


# -- experiment grids ----------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """Everything needed to reproduce one run."""

    task: TaskSpec = field(default_factory=TaskSpec)
    schedule: Schedule = field(default_factory=Schedule)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    budget: Budget = field(default_factory=Budget)
    seed: int = 0
    eval_every: int = 10
    feature_access: bool = True

    def with_seed(self, seed: int) -> "RunSpec":
        """Same experiment on the task and run streams of ``seed``."""
        return replace(self, seed=seed, task=replace(self.task, seed=seed))

    def to_dict(self) -> dict:
        return asdict(self)


def execute(spec: RunSpec, task: Task | None = None) -> RunResult:
    task = generate_task(spec.task) if task is None else task
    return run(task, spec.schedule, spec.estimator, spec.optimizer, spec.adapter, spec.budget,
               RngStream(spec.seed, stream_id=2), spec.eval_every, spec.feature_access)


AXES = ("q", "prompt_length", "shots", "schedule")
TABLE_COLUMNS = ("axis", "value", "seed", "q", "final_acc", "final_loss", "api_calls", "error")


def cell_spec(base: RunSpec, axis: str, value, seed: int, scale_q: bool = False) -> RunSpec:
    spec = base.with_seed(seed)
    if axis == "q":
        return replace(spec, estimator=replace(spec.estimator, q=int(value)))
    if axis == "prompt_length":
        M = int(value)
        spec = replace(spec, task=replace(spec.task, M=M))
        if scale_q:
            q = int(round(base.estimator.q * M / base.task.M))
            spec = replace(spec, estimator=replace(spec.estimator, q=q))
        return spec
    if axis == "shots":
        return replace(spec, task=replace(spec.task, shots=int(value)))
    if axis == "schedule":
        return replace(spec, schedule=replace(spec.schedule, variant=str(value)))
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def checkpoint_rows(result: RunResult) -> list[dict]:
    """Evaluated records as plain rows for curve files."""
    return [
        {"iter": r.iter, "phase": r.phase, "normalized_loss": r.normalized_loss,
         "accuracy": r.test_accuracy, "api_calls": r.api_calls_cum}
        for r in result.checkpoints()
    ]


def _run_cell(args) -> dict:
    axis, value, seed, spec, keep_curves = args
    row = {"axis": axis, "value": value, "seed": seed, "q": spec.estimator.q,
           "final_acc": None, "final_loss": None, "api_calls": None, "error": ""}
    try:
        res = execute(spec)
        row.update(final_acc=res.final_accuracy, final_loss=res.final_loss, api_calls=res.api_calls)
        if keep_curves:
            row["curve"] = checkpoint_rows(res)
    except Exception as exc:  # a failed cell is recorded, not fatal
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_cells(cells: list[tuple], jobs: int = 1, keep_curves: bool = False) -> list[dict]:
    """Run ``(axis, value, seed, spec)`` cells; rows come back in input order."""
    work = [(*c, keep_curves) for c in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_run_cell, work))
    return [_run_cell(w) for w in work]


def ablate(axis: str, values: list, base: RunSpec, seeds: list[int], scale_q: bool = False, jobs: int = 1) -> list[dict]:
    """Run ``values x seeds`` with everything else held at ``base``."""
    if not values:
        raise ValueError("ablation needs at least one value")
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    cells = [(axis, v, s, cell_spec(base, axis, v, s, scale_q)) for v in values for s in seeds]
    return run_cells(cells, jobs)


def median_by_value(rows: list[dict], key: str = "final_acc") -> dict:
    out: dict = {}
    for r in rows:
        if not r["error"]:
            out.setdefault(r["value"], []).append(r[key])
    return {v: float(np.median(xs)) for v, xs in out.items()}
