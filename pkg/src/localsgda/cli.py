"""Command-line experiment runner.

Commands::

    localsgda generate-data --config data.json [--output DIR] [--seed N]
    localsgda run           --config exp.json  [--output DIR] [--seed N] [--quiet]
    localsgda sweep-tau     --config exp.json  [--output DIR] [--seed N] [--quiet]
    localsgda check-gradients [--config cfg.json] [--seed N] [--quiet]

An experiment config is one JSON document::

    {
      "problem":   {"family": "robust_linreg", "dataset": "data/synth.fds", "lam_x": 1.0,
                    "dual": {"kind": "ball", "radius": 1.0}},
      "algorithm": "local_sgda",                      # or "local_sgda_plus"
      "run":       {"total_iters": 2000, "sync_gap": 10, "batch_size": 10, "master_seed": 7,
                    "primal_schedule": {"kind": "constant", "eta": 0.001}},
      "preset":    {"regime": "ncsc"},                # optional, replaces sync_gap/snapshot_gap/schedules
      "metrics":   {"robust_loss": true, "dist_to_saddle": false, "envelope_grad": false,
                    "objective": false, "heterogeneity": false},
      "init":      {"kind": "default"},               # "zeros", "normal" (with "scale") or "default"
      "sweep":     {"taus": [1, 5, 10], "target_loss": 117.0, "max_rounds": 200},
      "output":    "runs/exp1",
      "n_threads": 0
    }

Trace CSVs hold one row per communication round (plus the initial row) with
columns ``iter, comm_round, deviation_x, deviation_y`` followed by the enabled
metrics; floats are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from localsgda import __version__
from localsgda.algorithms import (
    DivergenceError,
    PresetRequest,
    RunResult,
    preset_hyperparams,
    run_local_sgda,
    run_local_sgda_plus,
)
from localsgda.core import RunConfig, make_rng, schedule_to_dict, worker_rng
from localsgda.datagen import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_idx,
    partition_by_label,
    save_dataset,
)
from localsgda.metrics import (
    dist_to_saddle_hook,
    envelope_grad_hook,
    heterogeneity_report,
    objective_hook,
    robust_loss_hook,
)
from localsgda.problems import (
    Ball,
    NcplToy,
    NcscToy,
    Penalty,
    QuadraticSaddle,
    RobustLinReg,
    RobustMlp,
    finite_diff_check,
    random_mlp_problem,
)

TRACE_SCHEMA_VERSION = 1
BASE_COLUMNS = ("iter", "comm_round", "deviation_x", "deviation_y")
# config metric toggle -> trace column(s), in fixed column order
METRIC_COLUMNS = (
    ("objective", ("objective",)),
    ("dist_to_saddle", ("dist_to_saddle",)),
    ("robust_loss", ("robust_loss", "robust_accuracy")),
    ("envelope_grad", ("envelope_grad_norm",)),
)
ROBUST_INNER_STEPS = 100
ROBUST_INNER_LR = 0.01
HYPERPARAM_KEYS = ("sync_gap", "snapshot_gap", "primal_schedule", "dual_schedule")
DIVERGENCE_EXIT = 2


class ConfigError(ValueError):
    pass


def fmt_float(v: float) -> str:
    return format(float(v), ".17g")


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _resolve_path(p: str, base: Path | None) -> Path:
    path = Path(p)
    if base is not None and not path.is_absolute():
        path = base / path
    return path


def build_problem(block: dict, base: Path | None = None):
    """Instantiate a problem from the ``problem`` block of a config."""
    block = dict(block)
    family = block.pop("family", None)
    if family == "quadratic":
        kw = {k: block[k] for k in ("sigma_g", "seed", "coupling", "heterogeneity") if k in block}
        if "eig_range" in block:
            kw["eig_range"] = tuple(block["eig_range"])
        return QuadraticSaddle.random(int(block["n_nodes"]), int(block["d_x"]), int(block["d_y"]), **kw)
    if family == "ncsc_toy":
        kw = {k: block[k] for k in ("sigma_g", "seed", "mu_y", "heterogeneity") if k in block}
        return NcscToy.random(int(block["n_nodes"]), int(block["d_x"]), int(block["d_y"]), **kw)
    if family == "ncpl_toy":
        kw = {k: block[k] for k in ("d_r", "sigma_g", "seed", "heterogeneity") if k in block}
        return NcplToy.random(int(block["n_nodes"]), int(block["d_x"]), int(block["d_y"]), **kw)
    if family == "robust_linreg":
        ds = _dataset_from_block(block, base)
        dual_block = block.get("dual", {"kind": "ball", "radius": 1.0})
        if dual_block.get("kind") == "penalty":
            dual = Penalty(float(dual_block["lam_y"]))
        elif dual_block.get("kind") == "ball":
            dual = Ball(float(dual_block.get("radius", 1.0)))
        else:
            raise ConfigError(f"unknown dual kind {dual_block.get('kind')!r}")
        return RobustLinReg.from_dataset(ds, lam_x=float(block.get("lam_x", 1.0)), dual=dual)
    if family == "robust_mlp":
        if "random" in block:
            return random_mlp_problem(**block["random"])
        ds = _dataset_from_block(block, base)
        return RobustMlp.from_dataset(ds, hidden=int(block.get("hidden", 200)),
                                      radius=float(block.get("radius", 1.0)))
    raise ConfigError(f"unknown problem family {family!r}")


def _dataset_from_block(block: dict, base: Path | None):
    if "dataset" in block:
        return load_dataset(_resolve_path(block["dataset"], base))
    if "synthetic" in block:
        return generate_synthetic(_synthetic_spec(block["synthetic"]))
    raise ConfigError("problem block needs 'dataset' or 'synthetic'")


def _synthetic_spec(d: dict) -> SyntheticSpec:
    kw = dict(d)
    if "samples_per_node" in kw:
        kw["samples_per_node"] = tuple(kw["samples_per_node"])
    spec = SyntheticSpec(**kw)
    spec.validate()
    return spec


def resolve_run_config(cfg: dict, problem, seed: int | None = None, sync_gap: int | None = None,
                       total_iters: int | None = None) -> RunConfig:
    """Merge explicit hyperparameters or a preset into a RunConfig."""
    run = dict(cfg.get("run", {}))
    run["n_workers"] = problem.n_nodes
    if seed is not None:
        run["master_seed"] = seed
    if total_iters is not None:
        run["total_iters"] = total_iters
    if "total_iters" not in run:
        raise ConfigError("run.total_iters is required")
    preset = cfg.get("preset")
    if preset is not None:
        clash = [k for k in HYPERPARAM_KEYS if k in run]
        if clash:
            raise ConfigError(f"preset and explicit hyperparameters both given: {clash}")
        constants = getattr(problem, "constants", None)
        req = PresetRequest(
            regime=preset["regime"],
            n=problem.n_nodes,
            T=int(run["total_iters"]),
            constants=constants,
            variant=preset.get("variant", "thm4_a"),
            snapshot_rule=preset.get("snapshot_rule", "theorem"),
        )
        p = preset_hyperparams(req)
        run["sync_gap"] = p.tau
        run["snapshot_gap"] = p.S if p.S is not None else 1
        run["primal_schedule"] = schedule_to_dict(p.primal)
        run["dual_schedule"] = schedule_to_dict(p.dual)
    elif "primal_schedule" not in run:
        raise ConfigError("run.primal_schedule is required without a preset")
    if sync_gap is not None:
        run["sync_gap"] = sync_gap
    return RunConfig.from_dict(run)


def initial_point(cfg: dict, problem, run_cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    init = cfg.get("init", {})
    kind = init.get("kind", "default")
    # a fresh copy of the node-0 stream, so worker sampling streams are untouched
    rng = worker_rng(int(init.get("seed", run_cfg.master_seed)), 0)
    if kind == "zeros" or (kind == "default" and not isinstance(problem, RobustMlp)):
        return np.zeros(problem.d_x), np.zeros(problem.d_y)
    if kind == "default":
        return problem.init_weights(rng), np.zeros(problem.d_y)
    if kind == "normal":
        scale = float(init.get("scale", 1.0))
        return scale * rng.standard_normal(problem.d_x), scale * rng.standard_normal(problem.d_y)
    raise ConfigError(f"unknown init kind {kind!r}")


def _robust_radius(problem, metrics: dict) -> float:
    if "robust_radius" in metrics:
        return float(metrics["robust_radius"])
    if isinstance(problem, RobustMlp):
        return problem.radius
    dual = getattr(problem, "dual", None)
    return dual.radius if isinstance(dual, Ball) else 1.0


def build_hooks(metrics: dict, problem) -> tuple[list, list[str]]:
    hooks, columns = [], []
    for toggle, cols in METRIC_COLUMNS:
        if not metrics.get(toggle, False):
            continue
        if toggle == "objective":
            hooks.append(objective_hook(problem))
        elif toggle == "dist_to_saddle":
            hooks.append(dist_to_saddle_hook(problem))
        elif toggle == "envelope_grad":
            problem.envelope(np.zeros(problem.d_x))  # fail early when there is no oracle
            hooks.append(envelope_grad_hook(problem))
        else:
            if not hasattr(problem, "eval_dual_grad"):
                raise ConfigError("robust_loss needs a problem with an evaluation set")
            hooks.append(robust_loss_hook(
                problem,
                inner_steps=int(metrics.get("robust_inner_steps", ROBUST_INNER_STEPS)),
                inner_lr=float(metrics.get("robust_inner_lr", ROBUST_INNER_LR)),
                radius=_robust_radius(problem, metrics),
            ))
            cols = cols if hasattr(problem, "eval_accuracy") else cols[:1]
        columns.extend(cols)
    return hooks, columns


# --------------------------------------------------------------------------
# trace output
# --------------------------------------------------------------------------

def trace_csv(result: RunResult, metric_columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(BASE_COLUMNS) + metric_columns)
    for rec in result.trace:
        if not rec.at_sync:
            continue
        row = [str(rec.iter), str(rec.comm_round), fmt_float(rec.deviation_x), fmt_float(rec.deviation_y)]
        for col in metric_columns:
            v = getattr(rec, col)
            row.append("" if v is None else fmt_float(v))
        writer.writerow(row)
    return buf.getvalue()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _final_metrics(result: RunResult, metric_columns: list[str]) -> dict:
    out = {}
    sync_rows = [r for r in result.trace if r.at_sync]
    last = sync_rows[-1]
    out["deviation_x"] = last.deviation_x
    out["deviation_y"] = last.deviation_y
    for col in metric_columns:
        out[col] = getattr(last, col)
    return out


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

def execute(cfg: dict, base: Path | None = None, seed: int | None = None, sync_gap: int | None = None,
            total_iters: int | None = None) -> dict:
    """Run one configured experiment; returns the CSV text, result and summary."""
    problem = build_problem(cfg["problem"], base)
    run_cfg = resolve_run_config(cfg, problem, seed=seed, sync_gap=sync_gap, total_iters=total_iters)
    metrics = cfg.get("metrics", {})
    hooks, columns = build_hooks(metrics, problem)
    x0, y0 = initial_point(cfg, problem, run_cfg)
    algorithm = cfg.get("algorithm", "local_sgda")
    runner = {"local_sgda": run_local_sgda, "local_sgda_plus": run_local_sgda_plus}.get(algorithm)
    if runner is None:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    result = runner(problem, run_cfg, x0, y0, metrics_hooks=hooks, n_threads=int(cfg.get("n_threads", 0)))
    summary = {
        "version": __version__,
        "trace_schema_version": TRACE_SCHEMA_VERSION,
        "trace_columns": list(BASE_COLUMNS) + columns,
        "algorithm": algorithm,
        "run_config": run_cfg.to_dict(),
        "config": cfg,
        "averaging_rounds": result.averaging_rounds,
        "snapshot_rounds": result.snapshot_rounds,
        "communication_rounds_used": result.communication_rounds_used,
        "total_local_steps": result.total_local_steps,
        "final_metrics": _final_metrics(result, columns),
        "wallclock_seconds": result.trace[-1].wallclock,
    }
    if metrics.get("robust_loss"):
        summary["robust_loss_inner"] = {
            "steps": int(metrics.get("robust_inner_steps", ROBUST_INNER_STEPS)),
            "lr": float(metrics.get("robust_inner_lr", ROBUST_INNER_LR)),
            "radius": _robust_radius(problem, metrics),
        }
    if metrics.get("heterogeneity"):
        probes = [(x0, y0), (result.x_bar, result.y_bar)]
        rep = heterogeneity_report(problem, probes)
        summary["heterogeneity"] = {k: getattr(rep, k) for k in
                                    ("delta_x", "delta_y", "zeta_x", "zeta_y", "n_probe_points")}
    return {"csv": trace_csv(result, columns), "result": result, "summary": summary, "columns": columns}


def _say(quiet: bool, *args) -> None:
    if not quiet:
        print(*args)


def cmd_generate_data(cfg: dict, output: Path, seed: int | None, quiet: bool, base: Path | None = None) -> Path:
    data = cfg.get("data", cfg)
    kind = data.get("kind", "synthetic")
    if kind == "synthetic":
        spec_d = {k: v for k, v in data.items() if k not in ("kind", "path")}
        if seed is not None:
            spec_d["seed"] = seed
        ds = generate_synthetic(_synthetic_spec(spec_d))
        default_name = f"synthetic_{spec_d['alpha']}.fds"
    elif kind == "idx":
        images, labels = load_idx(_resolve_path(data["images"], base), _resolve_path(data["labels"], base))
        test = (None, None)
        if "test_images" in data:
            test = load_idx(_resolve_path(data["test_images"], base), _resolve_path(data["test_labels"], base))
        ds = partition_by_label(images.reshape(len(images), -1), labels, int(data["n_nodes"]),
                                int(data.get("classes_per_node", 2)),
                                seed if seed is not None else int(data.get("seed", 0)),
                                test_features=None if test[0] is None else test[0].reshape(len(test[0]), -1),
                                test_labels=test[1])
        default_name = "partitioned.fds"
    else:
        raise ConfigError(f"unknown data kind {kind!r}")
    path = output / data.get("path", default_name)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    _say(quiet, f"wrote {path}")
    for i, m in enumerate(ds.node_sizes()):
        _say(quiet, f"node {i}: {m} samples")
    return path


def cmd_run(cfg: dict, output: Path, seed: int | None, quiet: bool, base: Path | None = None) -> dict:
    out = execute(cfg, base, seed=seed)
    _write_text(output / "trace.csv", out["csv"])
    _write_json(output / "summary.json", out["summary"])
    s = out["summary"]
    _say(quiet, f"{s['averaging_rounds']} averaging rounds, {s['communication_rounds_used']} communications")
    for k, v in s["final_metrics"].items():
        _say(quiet, f"  {k}: {v}")
    return out


def rounds_to_target(result: RunResult, metric: str, target: float) -> int | None:
    """Communication round at which ``metric`` first is <= target, or None."""
    for rec in result.trace:
        v = getattr(rec, metric)
        if rec.at_sync and v is not None and v <= target:
            return rec.comm_round
    return None


def _sweep_one(args):
    cfg, base, seed, tau, total_iters = args
    out = execute(cfg, base, seed=seed, sync_gap=tau, total_iters=total_iters)
    return out["csv"], out["result"], out["summary"]


def cmd_sweep_tau(cfg: dict, output: Path, seed: int | None, quiet: bool, base: Path | None = None) -> list[dict]:
    sweep = cfg.get("sweep", {})
    taus = [int(t) for t in sweep.get("taus", [])]
    if not taus:
        raise ConfigError("sweep.taus must be non-empty")
    if "target_loss" not in sweep:
        raise ConfigError("sweep.target_loss is required")
    target = float(sweep["target_loss"])
    metric = sweep.get("metric", "robust_loss")
    cfg = copy.deepcopy(cfg)
    cfg.setdefault("metrics", {})[_metric_toggle(metric)] = True
    if cfg.get("preset") is not None:
        raise ConfigError("sweep-tau sets sync_gap itself; remove the preset block")
    jobs = []
    for tau in taus:
        total = int(sweep["max_rounds"]) * tau if "max_rounds" in sweep else None
        jobs.append((cfg, base, seed, tau, total))
    n_jobs = int(sweep.get("n_jobs", 1))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outs = list(pool.map(_sweep_one, jobs))
    else:
        outs = [_sweep_one(j) for j in jobs]

    rows = []
    for tau, (text, result, summary) in zip(taus, outs):
        _write_text(output / f"trace_tau{tau}.csv", text)
        last = [r for r in result.trace if r.at_sync][-1]
        rows.append({
            "tau": tau,
            "rounds_to_target": rounds_to_target(result, metric, target),
            "final_metric": getattr(last, metric),
            "averaging_rounds": result.averaging_rounds,
            "communication_rounds_used": result.communication_rounds_used,
        })
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tau", "rounds_to_target", f"final_{metric}", "averaging_rounds", "communication_rounds_used"])
    for r in rows:
        reached = "not reached" if r["rounds_to_target"] is None else str(r["rounds_to_target"])
        writer.writerow([r["tau"], reached, fmt_float(r["final_metric"]), r["averaging_rounds"],
                         r["communication_rounds_used"]])
    _write_text(output / "sweep.csv", buf.getvalue())
    _write_json(output / "sweep_summary.json", {
        "version": __version__, "metric": metric, "target": target, "rows": rows, "config": cfg,
    })
    _say(quiet, format_table(rows, metric, target))
    return rows


def _metric_toggle(metric: str) -> str:
    for toggle, cols in METRIC_COLUMNS:
        if metric in cols:
            return toggle
    raise ConfigError(f"unknown sweep metric {metric!r}")


def format_table(rows: list[dict], metric: str, target: float) -> str:
    lines = [f"rounds until {metric} <= {target:g}", f"{'tau':>6}  {'rounds':>12}  {'final':>14}"]
    for r in rows:
        reached = "not reached" if r["rounds_to_target"] is None else str(r["rounds_to_target"])
        lines.append(f"{r['tau']:>6}  {reached:>12}  {r['final_metric']:>14.6g}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# gradient checks
# --------------------------------------------------------------------------

ANALYTIC_TOL = 1e-6
MLP_TOL = 1e-4


def builtin_problems(seed: int = 0) -> list[tuple[str, Any, float]]:
    """Small instances of every problem family with their gradient-check tolerance."""
    rng = make_rng(seed)
    feats = [rng.standard_normal((6, 3)) for _ in range(2)]
    targs = [rng.standard_normal(6) for _ in range(2)]
    return [
        ("quadratic", QuadraticSaddle.random(2, 3, 2, seed=seed), ANALYTIC_TOL),
        ("ncsc_toy", NcscToy.random(2, 3, 2, seed=seed), ANALYTIC_TOL),
        ("ncpl_toy", NcplToy.random(2, 2, 4, seed=seed), ANALYTIC_TOL),
        ("robust_linreg_ball", RobustLinReg(feats, targs, lam_x=0.5, dual=Ball(1.0)), ANALYTIC_TOL),
        ("robust_linreg_penalty", RobustLinReg(feats, targs, lam_x=0.5, dual=Penalty(2.0)), ANALYTIC_TOL),
        ("robust_mlp", random_mlp_problem(seed=seed), MLP_TOL),
    ]


def check_all_gradients(seed: int = 0, n_points: int = 20) -> list[dict]:
    rows = []
    for name, prob, tol in builtin_problems(seed):
        rng = make_rng(seed + 1)
        worst = 0.0
        for k in range(n_points):
            node = k % prob.n_nodes
            x = rng.standard_normal(prob.d_x)
            if isinstance(prob, RobustMlp):
                x = prob.init_weights(rng) + 0.1 * x
            y = 0.5 * rng.standard_normal(prob.d_y)
            ex, ey = finite_diff_check(prob, node, x, y)
            worst = max(worst, ex, ey)
        rows.append({"problem": name, "max_rel_err": worst, "tol": tol, "ok": worst <= tol})
    return rows


def cmd_check_gradients(cfg: dict, seed: int | None, quiet: bool) -> bool:
    gc = cfg.get("check_gradients", {})
    rows = check_all_gradients(seed if seed is not None else int(gc.get("seed", 0)),
                               int(gc.get("n_points", 20)))
    for r in rows:
        _say(quiet, f"{'PASS' if r['ok'] else 'FAIL'}  {r['problem']:<22} max rel err {r['max_rel_err']:.3e}"
                    f" (tol {r['tol']:g})")
    return all(r["ok"] for r in rows)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localsgda", description="Local SGDA / Local SGDA+ simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate-data", "run", "sweep-tau", "check-gradients"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "check-gradients")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--output", type=Path, default=None, help="output directory")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config is not None else {}
        base = args.config.parent if args.config is not None else None
        output = args.output or Path(cfg.get("output", "."))
        if args.command == "generate-data":
            cmd_generate_data(cfg, output, args.seed, args.quiet, base)
        elif args.command == "run":
            cmd_run(cfg, output, args.seed, args.quiet, base)
        elif args.command == "sweep-tau":
            cmd_sweep_tau(cfg, output, args.seed, args.quiet, base)
        else:
            return 0 if cmd_check_gradients(cfg, args.seed, args.quiet) else 1
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DIVERGENCE_EXIT
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
