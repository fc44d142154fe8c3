from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from bbtune.core import RngStream
from bbtune.estimator import EstimatorConfig
from bbtune.oracle import CapabilityError
from bbtune.toyvl import TaskSpec, generate_task
from bbtune.trainer import (
    AdapterConfig,
    Budget,
    OptimizerConfig,
    RunSpec,
    Schedule,
    ablate,
    cell_spec,
    evaluate,
    execute,
    median_by_value,
    run,
)


@pytest.fixture(scope="module")
def task():
    return generate_task(TaskSpec(seed=3))


def small(variant="PROMPT_ONLY", iters=20, q=9, **kw):
    return RunSpec(
        schedule=Schedule(variant=variant, prompt_epoch=10, adapter_epoch=5),
        estimator=EstimatorConfig(q=q),
        budget=Budget(max_iterations=iters, **kw),
        seed=3,
        task=TaskSpec(seed=3),
    )


def test_zero_shot_spends_nothing(task):
    res = execute(small("ZERO_SHOT"), task)
    assert res.api_calls == 0
    assert res.final_accuracy == evaluate(task, task.theta0)
    assert np.array_equal(res.prompt, task.theta0)


def test_prompt_only_query_count(task):
    res = execute(small(iters=30, q=10), task)
    assert res.api_calls == 30 * 11
    assert res.ledger.per_phase_queries == {"prompt": 330}


@pytest.mark.parametrize("name, per_step", [("spsa_gc", 10), ("cmaes", 10), ("sgd", 10)])
def test_query_cost_per_optimizer(task, name, per_step):
    spec = replace(small(iters=12), optimizer=OptimizerConfig(name=name))
    assert execute(spec, task).api_calls == 12 * per_step


def test_api_budget_truncates_mid_epoch(task):
    spec = replace(small(iters=None, max_api_calls=125), schedule=Schedule("PROMPT_ONLY", prompt_epoch=50))
    res = execute(spec, task)
    assert res.api_calls == 120
    assert len(res.records) == 12
    assert res.records[-1].test_accuracy is not None


def test_runs_are_deterministic(task):
    a, b = execute(small("ALT"), task), execute(small("ALT"), task)
    assert np.array_equal(a.prompt, b.prompt)
    strip = lambda rs: [(r.iter, r.phase, r.train_loss, r.normalized_loss, r.test_accuracy, r.api_calls_cum) for r in rs]
    assert strip(a.records) == strip(b.records)


@pytest.mark.parametrize("variant", ["ALT", "P_A", "A_P"])
def test_adapter_phases_spend_no_queries(task, variant):
    res = execute(small(variant), task)
    calls = [r.api_calls_cum for r in res.records]
    assert calls == sorted(calls)
    for prev, r in zip(res.records, res.records[1:]):
        if r.phase == "adapter":
            assert r.api_calls_cum == prev.api_calls_cum
    assert set(res.ledger.per_phase_queries) <= {"prompt"}
    assert any(r.phase == "adapter" for r in res.records)


def test_phases_freeze_the_other_party(task, monkeypatch):
    """During adapter epochs the prompt is untouched, and vice versa."""
    import bbtune.trainer as tr

    seen = []
    orig_adapter, orig_prompt = tr._Run.adapter_epoch, tr._Run.prompt_epoch

    def adapter_epoch(self):
        before = self.theta.copy()
        out = orig_adapter(self)
        seen.append(("adapter", np.array_equal(before, self.theta)))
        return out

    def prompt_epoch(self):
        before = None if self.adapter is None else self.adapter.to_dict()
        out = orig_prompt(self)
        seen.append(("prompt", before == (None if self.adapter is None else self.adapter.to_dict())))
        return out

    monkeypatch.setattr(tr._Run, "adapter_epoch", adapter_epoch)
    monkeypatch.setattr(tr._Run, "prompt_epoch", prompt_epoch)
    execute(small("ALT", iters=30), task)
    assert {p for p, _ in seen} == {"adapter", "prompt"}
    assert all(ok for _, ok in seen)


def test_strict_mode_rejects_adapter_schedules(task):
    with pytest.raises(CapabilityError):
        execute(replace(small("ALT"), feature_access=False), task)
    assert execute(replace(small("PROMPT_ONLY"), feature_access=False), task).api_calls > 0


def test_adapter_schedule_needs_adapter(task):
    with pytest.raises(ValueError):
        execute(replace(small("ALT"), adapter=AdapterConfig(kind="none")), task)


def test_mlp_adapter_schedule_runs(task):
    res = execute(replace(small("ALT"), adapter=AdapterConfig(kind="mlp")), task)
    assert res.adapter.to_dict()["kind"] == "mlp"


def test_evaluate_at_optimum_of_noiseless_task():
    t = generate_task(TaskSpec(seed=0, sigma=0.0, shift_strength=0.0))
    assert evaluate(t, t.model.theta_star) == 1.0


def test_evaluate_on_shuffled_labels_is_chance(task):
    t = generate_task(TaskSpec(seed=5, n_test=100))
    perm = RngStream(9).gen.permutation(t.data.test_y)
    shuffled = replace(t, data=replace(t.data, test_y=perm))
    n = len(perm)
    k = round(evaluate(shuffled, t.model.theta_star) * n)
    lo, hi = stats.binom.interval(0.999, n, 1 / t.data.C)
    assert lo <= k <= hi


def test_eval_every_controls_checkpoints(task):
    res = execute(replace(small(iters=20), eval_every=5), task)
    assert [r.iter for r in res.checkpoints()] == [4, 9, 14, 19]


def test_budget_validation():
    with pytest.raises(ValueError):
        Budget(max_iterations=None, max_api_calls=None)
    with pytest.raises(ValueError):
        Budget(max_iterations=0)
    with pytest.raises(ValueError):
        Schedule(variant="BOTH")
    with pytest.raises(ValueError):
        OptimizerConfig(name="lbfgs")


def test_cell_spec_scales_q():
    base = RunSpec(estimator=EstimatorConfig(q=256))
    assert cell_spec(base, "prompt_length", 8, 0, scale_q=True).estimator.q == 2048
    assert cell_spec(base, "prompt_length", 8, 0).estimator.q == 256
    assert cell_spec(base, "shots", 4, 7).task.seed == 7


def test_ablate_single_cell_and_failure():
    rows = ablate("q", [8], small(iters=10), [1])
    assert len(rows) == 1 and rows[0]["error"] == "" and rows[0]["api_calls"] == 90
    bad = ablate("schedule", ["ALT"], replace(small(iters=10), feature_access=False), [1])
    assert bad[0]["error"].startswith("CapabilityError")
    assert median_by_value(bad) == {}


def test_run_function_matches_execute(task):
    spec = small()
    a = execute(spec, task)
    b = run(task, spec.schedule, spec.estimator, spec.optimizer, spec.adapter, spec.budget, RngStream(3, stream_id=2))
    assert np.array_equal(a.prompt, b.prompt)
