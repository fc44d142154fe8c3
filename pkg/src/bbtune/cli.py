"""Command-line front end.

Each subcommand reads a JSON config, runs, and writes its artifacts whole-file
atomically. Exit codes: 0 success, 1 invalid config or input, 2 runtime
failure or failed assertion.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .core import RngStream
from .estimator import BoundInputs, EstimatorConfig, error_bound, estimate_stochastic
from .oracle import CapabilityError, LossOracle
from .toyvl import generate_task, task_from_dict, task_hash, task_json
from .trainer import TABLE_COLUMNS, RunResult, ablate, checkpoint_rows, execute, run_cells

MAX_CURVE_ROWS = 2000
CURVE_COLUMNS = ("iter", "phase", "normalized_loss", "accuracy", "api_calls")
BOUND_COLUMNS = ("q", "beta", "b", "D", "L", "grad_norm_sq", "mse", "bound", "smooth_term", "ratio", "violation")


class CommandFailed(RuntimeError):
    pass


# -- file output ---------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if r.get(k) is None else r[k] for k in columns})
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def downsample(rows: list, limit: int = MAX_CURVE_ROWS) -> list:
    """Evenly spaced subset of at most ``limit`` rows, always keeping both ends."""
    if len(rows) <= limit:
        return rows
    idx = np.unique(np.round(np.linspace(0, len(rows) - 1, limit)).astype(int))
    return [rows[i] for i in idx]


def curve_rows(result: RunResult) -> list[dict]:
    return downsample(checkpoint_rows(result))


# -- commands --------------------------------------------------------------------


def _load_task(cfg: ExperimentConfig, seed: int):
    if cfg.task_file is None:
        return generate_task(cfg.task.build(seed))
    path = Path(cfg.task_file)
    if not path.is_file():
        raise ConfigError(f"task_file: {path} does not exist (run gen-task first)")
    try:
        return task_from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError) as err:
        raise ConfigError(f"task_file: {path} is not a valid task file: {err}") from None


def cmd_gen_task(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    task = generate_task(cfg.task.build(cfg.seed))
    write_atomic(out / "task.json", task_json(task))
    print(task_hash(task))
    return 0


def cmd_tune(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    task = _load_task(cfg, cfg.seed)
    res = execute(cfg.run_spec(), task)
    write_atomic(out / "runlog.jsonl", "".join(json.dumps(r.__dict__, sort_keys=True) + "\n" for r in res.records))
    write_atomic(out / "curves.csv", csv_text(CURVE_COLUMNS, curve_rows(res)))
    final = {
        "final_accuracy": res.final_accuracy,
        "final_loss": res.final_loss,
        "total_queries": res.api_calls,
        "per_phase_queries": res.ledger.to_dict()["per_phase_queries"],
        "seed": cfg.seed,
        "task_hash": task_hash(task),
        "prompt": res.prompt.tolist(),
        "config": cfg.resolved(),
    }
    write_atomic(out / "final.json", json_text(final))
    if res.adapter is not None:
        write_atomic(out / "adapter.json", json_text(res.adapter.to_dict()))
    print(f"accuracy {res.final_accuracy:.4f}  queries {res.api_calls}")
    return 0


def cmd_compare_optimizers(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    opts = cfg.optimizers or []
    if len(opts) < 2:
        raise ConfigError("optimizers: comparison needs >= 2 optimizers")
    if cfg.budget.max_api_calls is None:
        raise ConfigError("budget.max_api_calls: comparison needs a shared API budget")
    names = [o.name for o in opts]
    labels = [n if names.count(n) == 1 else f"{n}#{i}" for i, n in enumerate(names)]
    cells = [("optimizer", label, s, cfg.run_spec(s, o)) for label, o in zip(labels, opts) for s in cfg.seed_list]
    results = run_cells(cells, jobs, keep_curves=True)
    rows, curves = [], []
    for r in results:
        rows.append({"optimizer": r["value"], "seed": r["seed"], "final_acc": r["final_acc"],
                     "final_loss": r["final_loss"], "api_calls": r["api_calls"], "error": r["error"]})
        for c in downsample(r.get("curve", [])):
            curves.append({"optimizer": r["value"], "seed": r["seed"], **c})
    write_atomic(out / "table.csv", csv_text(("optimizer", "seed", "final_acc", "final_loss", "api_calls", "error"), rows))
    write_atomic(out / "curves.csv", csv_text(("optimizer", "seed", *CURVE_COLUMNS), curves))
    for label in labels:
        accs = [r["final_acc"] for r in rows if r["optimizer"] == label and not r["error"]]
        print(f"{label:>10}  median accuracy {np.median(accs):.4f}" if accs else f"{label:>10}  failed")
    failed = [r for r in rows if r["error"]]
    if failed:
        raise CommandFailed(f"{len(failed)} cell(s) failed: " + "; ".join(f"{r['optimizer']}/seed {r['seed']}: {r['error']}" for r in failed))
    return 0


def bound_rows(cfg: ExperimentConfig) -> list[dict]:
    bc = cfg.bound
    D = bc.D
    rng = RngStream(cfg.seed, stream_id=3)
    gen = rng.gen
    x0 = bc.point_scale * gen.standard_normal(D)
    if bc.function == "linear":
        a, c = np.zeros(D), gen.standard_normal(D)
    else:
        a = np.ones(D) if bc.curvature is None else np.asarray(bc.curvature, dtype=np.float64)
        c = np.zeros(D)
    L = float(np.max(np.abs(a)))
    true_grad = a * x0 + c

    def batch(thetas):
        return 0.5 * np.sum(a * thetas**2, axis=1) + thetas @ c

    oracle = LossOracle(D, batch_fn=batch)
    rows = []
    for qi, q in enumerate(bc.q_values):
        for bi, beta in enumerate(bc.beta_values):
            est = EstimatorConfig(q=q, beta=beta, b=bc.b).resolve(D)
            cell = rng.fork(qi, bi)
            errs = [np.sum((estimate_stochastic(oracle, x0, est, cell.fork(t)).grad - true_grad) ** 2) for t in range(bc.trials)]
            mse = float(np.mean(errs))
            inputs = BoundInputs(est.b, D, q, beta, L, float(true_grad @ true_grad))
            bound = error_bound(inputs)
            smooth = error_bound(inputs) - error_bound(BoundInputs(est.b, D, q, beta, 0.0, inputs.grad_norm_sq))
            rows.append({"q": q, "beta": beta, "b": est.b, "D": D, "L": L, "grad_norm_sq": inputs.grad_norm_sq,
                         "mse": mse, "bound": bound, "smooth_term": smooth,
                         "ratio": mse / bound if bound > 0 else (0.0 if mse == 0 else float("inf")),
                         "violation": int(mse > bound)})
    return rows


def cmd_verify_bound(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    if cfg.bound is None:
        raise ConfigError("bound: verify-bound needs a 'bound' section")
    rows = bound_rows(cfg)
    write_atomic(out / "bound.csv", csv_text(BOUND_COLUMNS, rows))
    for r in rows:
        print(f"q={r['q']:<5} beta={r['beta']:<8g} mse={r['mse']:.4g}  bound={r['bound']:.4g}  ratio={r['ratio']:.3f}")
    bad = [r for r in rows if r["violation"]]
    if bad:
        raise CommandFailed("bound violated in cells: " + ", ".join(f"(q={r['q']}, beta={r['beta']})" for r in bad))
    return 0


def cmd_ablate(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    if cfg.ablation is None:
        raise ConfigError("ablation: ablate needs an 'ablation' section")
    ab = cfg.ablation
    rows = ablate(ab.axis, list(ab.values), cfg.run_spec(), cfg.seed_list, ab.scale_q, jobs)
    write_atomic(out / "table.csv", csv_text(TABLE_COLUMNS, rows))
    for v in ab.values:
        accs = [r["final_acc"] for r in rows if r["value"] == v and not r["error"]]
        print(f"{ab.axis}={v}  median accuracy {np.median(accs):.4f}" if accs else f"{ab.axis}={v}  failed")
    failed = [r for r in rows if r["error"]]
    if failed:
        raise CommandFailed(f"{len(failed)} cell(s) failed: " + "; ".join(f"{r['value']}/seed {r['seed']}: {r['error']}" for r in failed))
    return 0


COMMANDS = {
    "gen-task": cmd_gen_task,
    "tune": cmd_tune,
    "compare-optimizers": cmd_compare_optimizers,
    "verify-bound": cmd_verify_bound,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bbtune", description="Black-box prompt and adapter tuning experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="seed (overrides the config seed and seed list)")
        s.add_argument("--jobs", type=int, default=1, help="parallel cells for compare-optimizers and ablate")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is None and args.out is None:
        return cfg
    data = cfg.model_dump()
    if args.seed is not None:
        data.update(seed=args.seed, seeds=None)
    if args.out is not None:
        data["out"] = args.out
    return parse_config(data)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, Path(cfg.out), args.jobs)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except CapabilityError as err:
        print(f"error: missing capability: {err}", file=sys.stderr)
        return 2
    except (CommandFailed, RuntimeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
