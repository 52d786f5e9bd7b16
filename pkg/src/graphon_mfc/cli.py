"""Command line entry point: ``graphon-mfc run <config.json>`` and ``graphon-mfc describe <task>``."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import norm

from . import __version__
from .bellman import ActionGrid, BudgetExceededError, CandidateValue, bellman_residual, dpp_check, terminal_residual
from .calculus import (Bump, CylindricalOfCollection, CylindricalPerLabel, KInteraction, Linear, PairQuadraticKernel,
                       Polynomial, QuadraticOuter, ito_refinement_study)
from .dynamics import ActionSpaceError, ConstantPolicy, FeedbackPolicy, ParticleEnsemble, SimulationError, simulate
from .fixedpoint import PicardDivergenceError, picard_solve
from .io import write_collection_csv, write_flow_csv, write_json, write_table_csv
from .lq import build_lq_benchmark
from .measure_space import Graphon, LabelGrid
from .models import FAMILIES
from .probes import moment_bound_check, validate_coefficients

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NONCONVERGED = 0, 2, 3, 4
SEED_ENV = "GRAPHON_MFC_SEED"


class ConfigError(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# --------------------------------------------------------------------------
# schema: section -> field -> (types, default, help); REQUIRED marks mandatory fields

REQUIRED = object()
NUM = (int, float)

COMMON = {
    "grid": {
        "uniform": ((int, type(None)), 4, "number of equally weighted labels k/K (ignored when labels are given)"),
        "total_mass": (NUM, 1.0, "lambda(U) for uniform grids"),
        "labels": ((list, type(None)), None, "explicit label values"),
        "weights": ((list, type(None)), None, "explicit positive label weights"),
    },
    "graphon": {
        "kind": (str, "constant", "constant | identity | product | min | exp-distance | matrix"),
        "value": (NUM, 1.0, "value of the constant graphon"),
        "scale": (NUM, 1.0, "rate of exp-distance: exp(-scale |u - v|)"),
        "matrix": ((list, type(None)), None, "explicit K x K matrix for kind=matrix"),
    },
    "model": {
        "family": (str, "custom-polynomial", "graphon-lq | graphon-mean-reversion | custom-polynomial"),
        "params": (dict, {}, "keyword parameters of the family"),
    },
    "initial": {
        "distribution": (str, "normal", "normal | uniform | dirac"),
        "mean": (NUM, 0.0, "common mean"),
        "label_slope": (NUM, 0.0, "mean shift per unit label: mean + label_slope * u"),
        "std": (NUM, 1.0, "standard deviation (normal, uniform)"),
    },
    "simulation": {
        "t0": (NUM, 0.0, "initial time"),
        "T": (NUM, 1.0, "horizon"),
        "steps": (int, 100, "Euler steps"),
        "particles": (int, 1000, "particles per label"),
        "seed": (int, 0, "master seed (overridden by the GRAPHON_MFC_SEED environment variable)"),
        "record_every": (int, 1, "store every n-th step of the flow"),
    },
    "policy": {
        "kind": (str, "constant", "constant | linear | lq-feedback"),
        "value": ((int, float, list), 0.0, "constant action"),
        "gain": (NUM, 0.0, "linear feedback a = offset - gain x"),
        "offset": (NUM, 0.0, "linear feedback offset"),
        "shift": (NUM, 0.0, "additive perturbation of the lq-feedback"),
    },
}

TASKS = {
    "simulate": {"write_flow": (bool, False, "also write the full flow CSV")},
    "picard": {
        "max_iters": (int, 15, "maximum Picard iterations"),
        "tol": (NUM, 1e-3, "stopping tolerance on the path-coupled distance"),
        "window": ((int, float, str, type(None)), None, "time-splitting window length, 'auto', or null"),
    },
    "ito-verify": {
        "test_function": (dict, {"family": "linear", "components": [{"kind": "polynomial", "c2": [[2.0]]}]},
                          "family (linear | cylindrical-per-label | cylindrical-collection | pair-interaction), "
                          "components, outer {A, b, c}, kernel {W: graphon | ones, B, A1, A2}"),
        "steps_list": (list, [25, 50, 100, 200], "step counts of the refinement study (divisors of the largest)"),
        "control_variate": (bool, True, "subtract the discrete martingale"),
        "quadrature": (str, "midpoint", "midpoint | left"),
    },
    "bellman-residual": {
        "candidate": (str, "lq-riccati", "lq-riccati (needs family graphon-lq)"),
        "times": (list, [0.0, 0.25, 0.5, 0.75], "evaluation times"),
        "action_resolution": (NUM, 0.005, "spacing of the action grid"),
        "thin": (int, 1, "use every n-th particle of the initial collection"),
    },
    "dpp-check": {
        "theta": (NUM, REQUIRED, "intermediate time strictly inside (t0, T) on the time grid"),
        "actions": (list, [-0.5, 0.0, 0.5], "constant actions forming the control grid"),
        "continuation": (str, "common", "common | fresh noise after theta"),
        "budget": (int, 100, "maximum number of full-horizon combinations"),
    },
    "lq-benchmark": {
        "c": ((int, float, list), 1.0, "state cost weights c(u) per label"),
        "sigma0": (NUM, 0.5, "volatility"),
        "action_bound": (NUM, 10.0, "half-width of the action box"),
        "n_times": (int, 101, "rows of the Riccati trajectory CSV"),
    },
    "assumptions": {
        "probe_budget": (int, 200, "random probes for the coefficient report"),
        "moment_check": (bool, True, "also simulate and check the moment bound"),
    },
}

TOP_LEVEL = {"task": (str, REQUIRED, "one of " + ", ".join(TASKS)),
             "output_dir": ((str, type(None)), None, "run directory (overridden by --out)")}


def _section_key(task: str) -> str:
    return task.replace("-", "_")


def _check_section(name: str, schema: dict, given: Any) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}")
    out = {}
    for key, (types, default, _) in schema.items():
        if key in given:
            value = given[key]
            if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
                raise ConfigError(f"'{name}.{key}' has the wrong type")
            if not isinstance(value, types):
                raise ConfigError(f"'{name}.{key}' has the wrong type")
            out[key] = value
        elif default is REQUIRED:
            raise ConfigError(f"'{name}.{key}' is required")
        else:
            out[key] = json.loads(json.dumps(default))
    return out


def validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("the configuration must be a JSON object")
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; valid tasks: {sorted(TASKS)}")
    section = _section_key(task)
    allowed = set(TOP_LEVEL) | set(COMMON) | {section}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    cfg = {"task": task, "output_dir": raw.get("output_dir")}
    for name, schema in COMMON.items():
        cfg[name] = _check_section(name, schema, raw.get(name))
    cfg[section] = _check_section(section, TASKS[task], raw.get(section))
    sim = cfg["simulation"]
    if sim["steps"] < 1 or sim["particles"] < 1 or sim["record_every"] < 1:
        raise ConfigError("steps, particles and record_every must be positive")
    if not sim["T"] > sim["t0"]:
        raise ConfigError("need t0 < T")
    if sim["steps"] % sim["record_every"]:
        raise ConfigError("record_every must divide steps")
    if cfg["model"]["family"] not in FAMILIES:
        raise ConfigError(f"unknown model family; choose from {sorted(FAMILIES)}")
    return cfg


def describe(task: str) -> str:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; valid tasks: {sorted(TASKS)}")
    lines = [f"task: {task}", "", "top-level keys:"]
    for key, (_, default, text) in TOP_LEVEL.items():
        lines.append(f"  {key}: {'required' if default is REQUIRED else json.dumps(default)}  # {text}")
    for name, schema in list(COMMON.items()) + [(_section_key(task), TASKS[task])]:
        lines.append(f"{name}:")
        for key, (_, default, text) in schema.items():
            shown = "required" if default is REQUIRED else json.dumps(default)
            lines.append(f"  {key}: {shown}  # {text}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# building objects from a validated config


def build_grid(section: dict) -> LabelGrid:
    if section["labels"] is not None:
        weights = section["weights"] if section["weights"] is not None else [1.0 / len(section["labels"])] * len(section["labels"])
        return LabelGrid(section["labels"], weights)
    if section["uniform"] is None or section["uniform"] < 1:
        raise ConfigError("grid needs a positive 'uniform' count or explicit labels")
    return LabelGrid.uniform(section["uniform"], section["total_mass"])


def build_graphon(section: dict, grid: LabelGrid) -> Graphon:
    kind = section["kind"]
    if kind == "constant":
        return Graphon.constant(grid, section["value"])
    if kind == "identity":
        return Graphon.identity(grid)
    if kind == "product":
        return Graphon.from_kernel(lambda u, v: u * v, grid)
    if kind == "min":
        return Graphon.from_kernel(min, grid)
    if kind == "exp-distance":
        return Graphon.from_kernel(lambda u, v: float(np.exp(-section["scale"] * abs(u - v))), grid)
    if kind == "matrix":
        if section["matrix"] is None:
            raise ConfigError("graphon kind 'matrix' needs 'matrix'")
        return Graphon(grid, np.asarray(section["matrix"], dtype=float))
    raise ConfigError(f"unknown graphon kind {kind!r}")


def build_quantile_map(section: dict):
    mean, slope, std = section["mean"], section["label_slope"], section["std"]
    dist = section["distribution"]
    if dist == "normal":
        return lambda u, z: mean + slope * u + std * norm.ppf(z)
    if dist == "uniform":
        return lambda u, z: mean + slope * u + std * np.sqrt(3.0) * (2.0 * z - 1.0)
    if dist == "dirac":
        return lambda u, z: np.full(np.shape(z), mean + slope * u)
    raise ConfigError(f"unknown initial distribution {dist!r}")


def build_model(cfg: dict, grid: LabelGrid, graphon: Graphon):
    try:
        return FAMILIES[cfg["model"]["family"]](grid, graphon, **cfg["model"]["params"])
    except TypeError as exc:
        raise ConfigError(f"invalid model parameters: {exc}") from exc


def build_policy(section: dict, coeffs, bench=None):
    kind = section["kind"]
    if kind == "constant":
        value = np.atleast_1d(np.asarray(section["value"], dtype=float))
        if value.size == 1 and coeffs.action_dim > 1:
            value = np.full(coeffs.action_dim, value[0])
        return ConstantPolicy(value)
    if kind == "linear":
        gain, offset = section["gain"], section["offset"]
        return FeedbackPolicy(lambda k, t, x, mu: offset - gain * x, name="linear")
    if kind == "lq-feedback":
        if bench is None:
            raise ConfigError("lq-feedback needs the graphon-lq family")
        return bench.feedback(section["shift"])
    raise ConfigError(f"unknown policy kind {kind!r}")


def _component(section: dict, dim: int):
    section = dict(section)
    kind = section.pop("kind", "polynomial")
    if kind == "polynomial":
        allowed = {"c0", "c1", "c2"}
        if set(section) - allowed:
            raise ConfigError(f"unknown polynomial keys {sorted(set(section) - allowed)}")
        return Polynomial(section.get("c0", 0.0), section.get("c1"), section.get("c2"), dim)
    if kind == "bump":
        allowed = {"center", "width", "amplitude"}
        if set(section) - allowed:
            raise ConfigError(f"unknown bump keys {sorted(set(section) - allowed)}")
        return Bump(section.get("center", np.zeros(dim)), section.get("width", 1.0), section.get("amplitude", 1.0))
    raise ConfigError(f"unknown component kind {kind!r}")


def build_test_function(section: dict, grid: LabelGrid, graphon: Graphon, dim: int):
    allowed = {"family", "components", "outer", "kernel"}
    if set(section) - allowed:
        raise ConfigError(f"unknown test-function keys {sorted(set(section) - allowed)}")
    family = section.get("family", "linear")
    comps = [_component(c, dim) for c in section.get("components", [])]
    if family == "linear":
        if len(comps) != 1:
            raise ConfigError("the linear family takes exactly one component")
        return Linear(comps[0])
    if family in ("cylindrical-per-label", "cylindrical-collection"):
        outer = section.get("outer", {})
        m = len(comps)
        if m == 0:
            raise ConfigError("cylindrical families need components")
        A = np.asarray(outer.get("A", np.eye(m)), dtype=float)
        F = QuadraticOuter(A, outer.get("b"), outer.get("c", 0.0))
        cls = CylindricalPerLabel if family == "cylindrical-per-label" else CylindricalOfCollection
        return cls(F, comps)
    if family == "pair-interaction":
        ker = section.get("kernel", {})
        W = graphon.matrix if ker.get("W", "graphon") == "graphon" else np.ones((len(grid), len(grid)))
        eye = np.eye(dim)
        return KInteraction(PairQuadraticKernel(W, B=ker.get("B", -eye), A1=ker.get("A1", eye),
                                                A2=ker.get("A2", eye), dim=dim))
    raise ConfigError(f"unknown test-function family {family!r}")


# --------------------------------------------------------------------------
# tasks


def _ensemble(cfg, grid, seed):
    return ParticleEnsemble.from_quantile_map(build_quantile_map(cfg["initial"]), grid,
                                              cfg["simulation"]["particles"], seed)


def _setup(cfg):
    grid = build_grid(cfg["grid"])
    graphon = build_graphon(cfg["graphon"], grid)
    return grid, graphon


def task_simulate(cfg, out: Path, threads: int, seed: int) -> dict:
    grid, graphon = _setup(cfg)
    coeffs = build_model(cfg, grid, graphon)
    bench = _maybe_bench(cfg, grid, graphon)
    policy = build_policy(cfg["policy"], coeffs, bench)
    sim = cfg["simulation"]
    init = _ensemble(cfg, grid, seed)
    res = simulate(coeffs, policy, init, sim["t0"], sim["T"], sim["steps"], seed,
                   record_every=sim["record_every"], threads=threads)
    files = [write_collection_csv(out / "initial.csv", init.measure, seed=seed),
             write_collection_csv(out / "final.csv", res.final.measure, seed=seed,
                                  provenance={"time": sim["T"]})]
    if cfg["simulate"]["write_flow"]:
        files.append(write_flow_csv(out / "flow.csv", res.flow, seed=seed))
    report = {"cost": res.cost_estimate, "stderr": res.std_error, "diagnostics": res.diagnostics}
    files.append(write_json(out / "cost.json", report))
    return {"files": files, "summary": report}


def task_picard(cfg, out, threads, seed):
    grid, graphon = _setup(cfg)
    coeffs = build_model(cfg, grid, graphon)
    policy = build_policy(cfg["policy"], coeffs, _maybe_bench(cfg, grid, graphon))
    sim, pc = cfg["simulation"], cfg["picard"]
    init = _ensemble(cfg, grid, seed)
    flow, state = picard_solve(coeffs, policy, init, sim["t0"], sim["T"], sim["steps"], pc["max_iters"], pc["tol"],
                               seed, window=pc["window"], threads=threads)
    files = [write_flow_csv(out / "flow.csv", flow, seed=seed), write_json(out / "picard_state.json", state.to_dict())]
    summary = {"converged": state.converged, "converged_at_iteration": state.converged_at_iteration,
               "iterations": state.iterate_index, "final_distance": state.distance_history[-1]}
    if not state.converged:
        return {"files": files, "summary": summary, "nonconverged": "Picard iteration did not reach tol"}
    return {"files": files, "summary": summary}


def task_ito(cfg, out, threads, seed):
    grid, graphon = _setup(cfg)
    coeffs = build_model(cfg, grid, graphon)
    policy = build_policy(cfg["policy"], coeffs, _maybe_bench(cfg, grid, graphon))
    sim, it = cfg["simulation"], cfg["ito_verify"]
    tf = build_test_function(it["test_function"], grid, graphon, coeffs.dim)
    init = _ensemble(cfg, grid, seed)
    study = ito_refinement_study(tf, coeffs, policy, init, sim["t0"], sim["T"], it["steps_list"], seed,
                                 control_variate=it["control_variate"], quadrature=it["quadrature"])
    rows = [(s, dt, r.lhs, r.rhs, r.residual, r.residual_cv if r.residual_cv is not None else float("nan"))
            for s, dt, r in zip(study.steps, study.dts, study.reports)]
    files = [write_table_csv(out / "ito_residuals.csv", ["steps", "dt", "lhs", "rhs", "residual", "residual_cv"], rows),
             write_json(out / "ito.json", {"slope": study.slope, "reports": [r.to_dict() for r in study.reports]})]
    return {"files": files, "summary": {"slope": study.slope, "residuals": study.residuals}}


def _maybe_bench(cfg, grid, graphon):
    if cfg["model"]["family"] != "graphon-lq":
        return None
    params = dict(cfg["model"]["params"])
    try:
        return build_lq_benchmark(grid, graphon, T=cfg["simulation"]["T"], **params)
    except TypeError as exc:
        raise ConfigError(f"invalid graphon-lq parameters: {exc}") from exc


def task_bellman(cfg, out, threads, seed):
    grid, graphon = _setup(cfg)
    bench = _maybe_bench(cfg, grid, graphon)
    if bench is None:
        raise ConfigError("the lq-riccati candidate needs the graphon-lq family")
    if cfg["simulation"]["t0"] != 0.0:
        raise ConfigError("the lq-riccati candidate is defined on [0, T]; use t0 = 0")
    br = cfg["bellman_residual"]
    coeffs, cand = bench.coeffs, bench.candidate()
    init = _ensemble(cfg, grid, seed)
    atoms = init.positions[:, :: br["thin"]]
    from .measure_space import MeasureCollection
    mu = MeasureCollection.from_array(grid, atoms)
    agrid = ActionGrid.from_resolution(coeffs.action_space, br["action_resolution"])
    rows = []
    for t in br["times"]:
        rep = bellman_residual(coeffs, cand, float(t), mu, agrid)
        rows.append({"t": float(t), "residual": rep.residual, "dt": rep.dt, "infimum": rep.infimum})
    term = terminal_residual(coeffs, cand, mu, cfg["simulation"]["T"])
    report = {"residuals": rows, "terminal_residual": term, "grid_resolution": agrid.resolution,
              "oracle_refs": {"candidate": cand.name, "riccati_residual": bench.riccati_residual(br["times"])}}
    return {"files": [write_json(out / "bellman.json", report)],
            "summary": {"max_abs_residual": max(abs(r["residual"]) for r in rows), "terminal_residual": term}}


def task_dpp(cfg, out, threads, seed):
    grid, graphon = _setup(cfg)
    coeffs = build_model(cfg, grid, graphon)
    sim, dp = cfg["simulation"], cfg["dpp_check"]
    init = _ensemble(cfg, grid, seed)
    controls = [ConstantPolicy(np.full(coeffs.action_dim, float(a))) for a in dp["actions"]]
    rep = dpp_check(coeffs, sim["t0"], init, dp["theta"], sim["T"], controls, sim["steps"], seed,
                    budget=dp["budget"], continuation=dp["continuation"])
    return {"files": [write_json(out / "dpp.json", rep.to_dict())],
            "summary": {"gap": rep.gap, "stderr": rep.stderr}}


def task_lq(cfg, out, threads, seed):
    grid, graphon = _setup(cfg)
    lq = cfg["lq_benchmark"]
    bench = build_lq_benchmark(grid, graphon, lq["c"], lq["sigma0"], cfg["simulation"]["T"], lq["action_bound"])
    times, rows = bench.trajectories(lq["n_times"])
    K = bench.K
    header = (["t"] + [f"p_{k}" for k in range(K)] + [f"r_{k}" for k in range(K)]
              + [f"P_{i}_{j}" for i in range(K) for j in range(K)])
    files = [write_table_csv(out / "riccati.csv", header, [[t] + list(r) for t, r in zip(times, rows)])]
    init = _ensemble(cfg, grid, seed)
    report = {"value_at_t0": bench.value(0.0, init.measure), "riccati_residual": bench.riccati_residual(times),
              "p0": bench.p(0.0), "P0": bench.P(0.0)}
    files.append(write_json(out / "lq.json", report))
    return {"files": files, "summary": {"value_at_t0": report["value_at_t0"],
                                        "riccati_residual": report["riccati_residual"]}}


def task_assumptions(cfg, out, threads, seed):
    grid, graphon = _setup(cfg)
    coeffs = build_model(cfg, grid, graphon)
    asm = cfg["assumptions"]
    rep = validate_coefficients(coeffs, asm["probe_budget"], seed, grid=grid)
    report = {"coefficients": rep.to_dict()}
    if asm["moment_check"]:
        sim = cfg["simulation"]
        policy = build_policy(cfg["policy"], coeffs, _maybe_bench(cfg, grid, graphon))
        init = _ensemble(cfg, grid, seed)
        res = simulate(coeffs, policy, init, sim["t0"], sim["T"], sim["steps"], seed, threads=threads)
        report["moments"] = moment_bound_check(coeffs, res, init)
    return {"files": [write_json(out / "assumptions.json", report)],
            "summary": {"violations": rep.violations}}


RUNNERS = {"simulate": task_simulate, "picard": task_picard, "ito-verify": task_ito,
           "bellman-residual": task_bellman, "dpp-check": task_dpp, "lq-benchmark": task_lq,
           "assumptions": task_assumptions}


# --------------------------------------------------------------------------
# orchestration


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form (stable under key reordering)."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _fail(out: Path | None, code: int, exc: Exception) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, SimulationError) and exc.step is not None:
        err["step"] = exc.step
    print(json.dumps(err), file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "error.json", err)
    return code


def run(config_path, threads: int | None = None, out_dir=None) -> int:
    out = Path(out_dir) if out_dir else None
    try:
        raw_bytes = Path(config_path).read_bytes()
        raw = json.loads(raw_bytes)
        cfg = validate_config(raw)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        return _fail(out, EXIT_CONFIG, exc)
    if os.environ.get(SEED_ENV):
        try:
            cfg["simulation"]["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            return _fail(out, EXIT_CONFIG, ConfigError(f"{SEED_ENV} must be an integer"))
    seed = cfg["simulation"]["seed"]
    digest = config_hash(cfg)
    if out is None:
        out = Path(cfg["output_dir"] or f"runs/{cfg['task']}-{digest[:12]}")
    out.mkdir(parents=True, exist_ok=True)
    threads = threads or os.cpu_count() or 1
    start = time.perf_counter()
    try:
        result = RUNNERS[cfg["task"]](cfg, out, threads, seed)
    except ConfigError as exc:
        return _fail(out, EXIT_CONFIG, exc)
    except (SimulationError, PicardDivergenceError, ActionSpaceError, BudgetExceededError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        return _fail(out, EXIT_NUMERICAL, exc)
    except (ValueError, TypeError) as exc:
        return _fail(out, EXIT_CONFIG, exc)
    (out / "config.json").write_bytes(raw_bytes)
    write_json(out / "resolved_config.json", cfg)
    outputs = sorted(p.name for p in result["files"]) + ["config.json", "resolved_config.json"]
    code = EXIT_NONCONVERGED if "nonconverged" in result else EXIT_OK
    manifest = {"task": cfg["task"], "config_hash": digest, "seed": seed, "version": __version__,
                "wall_time_seconds": time.perf_counter() - start, "outputs": outputs,
                "exit_code": code, **result["summary"]}
    write_json(out / "manifest.json", manifest)
    if code == EXIT_NONCONVERGED:
        return _fail(out, code, NonConvergence(result["nonconverged"]))
    print(json.dumps({"status": "ok", "output_dir": str(out), "task": cfg["task"]}))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="graphon-mfc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute the task named in a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--threads", type=int, default=None, help="worker threads (default: hardware count)")
    p_run.add_argument("--out", default=None, help="output directory")
    p_desc = sub.add_parser("describe", help="print the config schema and defaults of a task")
    p_desc.add_argument("task")
    args = parser.parse_args(argv)
    if args.command == "describe":
        try:
            print(describe(args.task))
        except ConfigError as exc:
            print(json.dumps({"error": "ConfigError", "message": str(exc), "exit_code": EXIT_CONFIG}), file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    return run(args.config, args.threads, args.out)


if __name__ == "__main__":
    sys.exit(main())
