"""Black-box boundary audits: import surface and query accounting."""

import ast
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import bbtune
from bbtune.estimator import EstimatorConfig
from bbtune.toyvl import TaskSpec, generate_task
from bbtune.trainer import Budget, RunSpec, Schedule, execute

SRC = Path(bbtune.__file__).parent
ALLOWED_STDLIB = {"__future__", "math", "dataclasses", "numpy"}
ALLOWED_LOCAL = {"core", "estimator", "oracle"}


def imports_of(module: str) -> tuple[set, set]:
    tree = ast.parse((SRC / f"{module}.py").read_text())
    external, local = set(), set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            external |= {a.name.split(".")[0] for a in node.names}
        elif isinstance(node, ast.ImportFrom):
            if node.level:
                local.add(node.module)
            else:
                external.add(node.module.split(".")[0])
    return external, local


@pytest.mark.parametrize("module", ["estimator", "optim"])
def test_search_modules_see_only_the_oracle_contract(module):
    external, local = imports_of(module)
    assert external <= ALLOWED_STDLIB, external - ALLOWED_STDLIB
    assert local <= ALLOWED_LOCAL, local - ALLOWED_LOCAL


def test_oracle_contract_has_no_model_dependency():
    external, local = imports_of("oracle")
    assert local <= {"core"}
    assert "scipy" not in external


def test_search_modules_run_against_a_bare_oracle():
    """A fresh interpreter drives every optimizer on a plain function, never
    loading the model, adapter or trainer modules."""
    code = """
import sys
import numpy as np
from bbtune.core import RngStream
from bbtune.estimator import EstimatorConfig
from bbtune.oracle import LossOracle
from bbtune.optim import CmaEsDriver, EstimatedGradientDriver, SpsaGcDriver
f = LossOracle(6, loss_fn=lambda x: float(np.sum((x - 1) ** 2)))
for d in (EstimatedGradientDriver(6, EstimatorConfig(q=8).resolve(6), "adam", 0.05), SpsaGcDriver(6), CmaEsDriver(np.zeros(6), 0.3, 8)):
    theta = np.zeros(6)
    for k in range(1, 30):
        theta, _ = d.step(f, theta, k, RngStream(0).fork(k))
loaded = sorted(m for m in sys.modules if m.startswith("bbtune."))
print(",".join(loaded))
"""
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    assert set(out.split(",")) == {"bbtune.core", "bbtune.estimator", "bbtune.oracle", "bbtune.optim"}


@pytest.mark.parametrize("variant", ["ALT", "P_A", "A_P", "ADAPTER_ONLY"])
def test_adapter_training_adds_zero_queries(variant):
    task = generate_task(TaskSpec(seed=1))
    spec = RunSpec(schedule=Schedule(variant=variant, prompt_epoch=10, adapter_epoch=10),
                   estimator=EstimatorConfig(q=4), budget=Budget(max_iterations=20), seed=1, task=TaskSpec(seed=1))
    res = execute(spec, task)
    prompt_iters = sum(r.phase == "prompt" for r in res.records)
    adapter_steps = sum(r.phase == "adapter" for r in res.records)
    assert adapter_steps > 0
    assert res.ledger.per_phase_queries.get("adapter", 0) == 0
    assert res.api_calls == prompt_iters * 5
    deltas = np.diff([0] + [r.api_calls_cum for r in res.records])
    phases = np.array([r.phase for r in res.records])
    assert np.all(deltas[phases == "adapter"] == 0)
