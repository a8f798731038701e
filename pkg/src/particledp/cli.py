"""Command-line front end: declarative configs, solves, evaluation, oracles.

Subcommands:
  solve    parse a config, run the particle DP solver, export artifacts
  eval     query value/policy of a saved solution at arbitrary states
  rollout  closed-loop simulation under a saved solution's policy
  verify   run the oracle batteries (riccati/contraction/tiny/is)

Configs are JSON documents (conventionally with a .cfg extension, see the
bundled `configs/example1.cfg` and `configs/example2.cfg`).  Unknown keys are
rejected, every default is materialized into the echoed effective config, and
all randomness is traceable to the three named seeds (particles, controls,
noise).  Exit codes: 0 success, 2 usage/config error, 3 solver-flagged
condition (not converged, all particles infeasible), 1 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import bellman as _b
from . import model as _m
from .constraints import AllInfeasibleError, ConstraintSpec, SafeSet
from .model import ConfigurationError
from .oracle import (
    contraction_battery,
    fit_quadratic,
    is_consistency_battery,
    riccati_battery,
    tiny_dp_battery,
)
from .sampling import draw_particles, sample_control_grid

log = logging.getLogger("particledp")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3

OUTPUT_DIR_ENV = "PARTICLEDP_OUTPUT_DIR"


class ConfigError(ConfigurationError):
    """Config validation failure carrying the offending field path."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


# ---------------------------------------------------------------------------
# Config schema: allowed keys, defaults, validation


_KIND_KEYS = {
    "dynamics": {
        "linear": {"kind", "F", "B"},
        "bilinear2d": {"kind"},
    },
    "cost": {"quadratic": {"kind", "Q", "R"}},
    "terminal": {"zero": {"kind"}, "quadratic": {"kind", "Q"}},
    "density": {
        "gaussian": {"kind", "mean", "cov"},
        "truncated_gaussian": {"kind", "mean", "cov", "box"},
        "uniform": {"kind", "box"},
        "mixture": {"kind", "weights", "components"},
    },
    "control_space": {
        "finite": {"kind", "controls"},
        "box": {"kind", "box", "n_controls", "density"},
    },
}


def _require_keys(block: dict, allowed: set, path: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(path, f"expected an object, got {type(block).__name__}")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(path, f"unknown keys: {sorted(unknown)}")


def _check_kind_block(block, family: str, path: str, *, optional_ok: bool = False):
    if block is None and optional_ok:
        return None
    if not isinstance(block, dict) or "kind" not in block:
        raise ConfigError(path, "expected an object with a 'kind' key")
    kinds = _KIND_KEYS[family]
    kind = block["kind"]
    if kind not in kinds:
        raise ConfigError(f"{path}.kind", f"unknown kind {kind!r}; expected one of {sorted(kinds)}")
    _require_keys(block, kinds[kind], path)
    if family == "density" and kind == "mixture":
        comps = block.get("components")
        if not isinstance(comps, list) or not comps:
            raise ConfigError(f"{path}.components", "expected a nonempty list")
        for i, comp in enumerate(comps):
            _check_kind_block(comp, "density", f"{path}.components[{i}]")
    if family == "control_space" and kind == "box":
        dens = block.get("density")
        if dens is not None:
            _check_kind_block(dens, "density", f"{path}.density")
    return block


def load_config(path_or_name: str) -> dict:
    """Read a JSON config from a file path or a bundled name (example1/example2)."""
    p = Path(path_or_name)
    if p.is_file():
        text = p.read_text()
    else:
        name = p.name if p.name.endswith(".cfg") else p.name + ".cfg"
        try:
            text = resources.files("particledp").joinpath("configs", name).read_text()
        except (FileNotFoundError, ModuleNotFoundError):
            raise ConfigError("config", f"no such config file or bundled name: {path_or_name}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")


def validate_config(raw: dict) -> dict:
    """Schema-check a raw config and materialize every default.

    The returned effective config is self-contained: echoing it and re-running
    reproduces the run exactly (given the same package version).
    """
    _require_keys(raw, {"problem", "solver", "constraints", "output"}, "config")
    if "problem" not in raw or "solver" not in raw:
        raise ConfigError("config", "missing required blocks 'problem' and/or 'solver'")

    prob = raw["problem"]
    _require_keys(
        prob,
        {"dynamics", "cost", "terminal", "noise", "state_box", "sampling", "control_space"},
        "problem",
    )
    for key in ("dynamics", "cost", "noise", "state_box", "sampling", "control_space"):
        if key not in prob:
            raise ConfigError(f"problem.{key}", "missing required key")
    _check_kind_block(prob["dynamics"], "dynamics", "problem.dynamics")
    _check_kind_block(prob["cost"], "cost", "problem.cost")
    terminal = prob.get("terminal", {"kind": "zero"})
    _check_kind_block(terminal, "terminal", "problem.terminal")
    _check_kind_block(prob["noise"], "density", "problem.noise")
    _check_kind_block(prob["sampling"], "density", "problem.sampling")
    _check_kind_block(prob["control_space"], "control_space", "problem.control_space")

    sol = raw["solver"]
    allowed_solver = {
        "mode",
        "alpha",
        "tol",
        "max_iters",
        "floor",
        "horizon",
        "stage_discount",
        "n_particles",
        "init",
        "seeds",
        "threads",
        "cache_mode",
        "on_no_overlap",
    }
    _require_keys(sol, allowed_solver, "solver")
    mode = sol.get("mode")
    if mode not in ("discounted", "finite"):
        raise ConfigError("solver.mode", "must be 'discounted' or 'finite'")
    if mode == "discounted" and sol.get("alpha") is None:
        raise ConfigError("solver.alpha", "required for discounted mode")
    if mode == "finite" and sol.get("horizon") is None:
        raise ConfigError("solver.horizon", "required for finite mode")
    if sol.get("n_particles") is None:
        raise ConfigError("solver.n_particles", "missing required key")
    seeds = sol.get("seeds", {})
    _require_keys(seeds, {"particles", "controls", "noise"}, "solver.seeds")
    for name in ("particles", "controls", "noise"):
        if name in seeds and not isinstance(seeds[name], int):
            raise ConfigError(f"solver.seeds.{name}", "seed must be an integer")
    init = sol.get("init", "stage_cost")
    if init not in ("stage_cost", "zero"):
        raise ConfigError("solver.init", "must be 'stage_cost' or 'zero'")

    cons = raw.get("constraints")
    if cons is not None:
        _require_keys(
            cons,
            {"safe_boxes", "unsafe_boxes", "epsilon", "infeasible_mode", "infeasible_value"},
            "constraints",
        )
        has_safe = cons.get("safe_boxes") is not None
        has_unsafe = cons.get("unsafe_boxes") is not None
        if has_safe == has_unsafe:
            raise ConfigError(
                "constraints", "declare exactly one of 'safe_boxes' or 'unsafe_boxes'"
            )

    out = raw.get("output", {})
    _require_keys(out, {"directory", "fit_quadratic", "exports"}, "output")

    effective = {
        "problem": {
            "dynamics": prob["dynamics"],
            "cost": prob["cost"],
            "terminal": terminal,
            "noise": prob["noise"],
            "state_box": prob["state_box"],
            "sampling": prob["sampling"],
            "control_space": prob["control_space"],
        },
        "solver": {
            "mode": mode,
            "alpha": sol.get("alpha"),
            "tol": sol.get("tol", 1e-3),
            "max_iters": int(sol.get("max_iters", 1000)),
            "floor": sol.get("floor", 1e-8),
            "horizon": sol.get("horizon"),
            "stage_discount": sol.get("stage_discount", 1.0),
            "n_particles": int(sol["n_particles"]),
            "init": init,
            "seeds": {
                "particles": int(seeds.get("particles", 0)),
                "controls": int(seeds.get("controls", 1)),
                "noise": int(seeds.get("noise", 2)),
            },
            "threads": sol.get("threads"),
            "cache_mode": sol.get("cache_mode", "auto"),
            "on_no_overlap": sol.get("on_no_overlap", "error"),
        },
        "constraints": None,
        "output": {
            "directory": out.get("directory", "particledp_out"),
            "fit_quadratic": bool(out.get("fit_quadratic", False)),
            "exports": out.get(
                "exports",
                ["particles", "weights", "policy_map", "feasibility", "solution", "report"],
            ),
        },
    }
    if cons is not None:
        effective["constraints"] = {
            "safe_boxes": cons.get("safe_boxes"),
            "unsafe_boxes": cons.get("unsafe_boxes"),
            "epsilon": float(cons.get("epsilon", 0.05)),
            "infeasible_mode": cons.get("infeasible_mode", "penalty"),
            "infeasible_value": cons.get("infeasible_value"),
        }
        if effective["constraints"]["infeasible_mode"] not in ("penalty", "renormalize"):
            raise ConfigError("constraints.infeasible_mode", "must be 'penalty' or 'renormalize'")
    return effective


def apply_overrides(effective: dict, assignments: list) -> dict:
    """Apply `--set dotted.path=json_value` overrides, last one wins."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError("--set", f"expected path=value, got {item!r}")
        dotted, _, value_text = item.partition("=")
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            value = value_text  # bare strings allowed
        node = effective
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                if node.get(part) is None and part in ("constraints",):
                    node[part] = {}
                else:
                    raise ConfigError(dotted, f"no such config block: {part}")
            node = node[part]
        node[parts[-1]] = value
    return effective


# ---------------------------------------------------------------------------
# Building runtime objects from the effective config


def build_problem(effective: dict) -> _b.ProblemSpec:
    prob = effective["problem"]
    sol = effective["solver"]
    if sol["mode"] == "discounted":
        mode = _b.InfiniteDiscounted(
            alpha=float(sol["alpha"]),
            tol=float(sol["tol"]),
            max_iters=int(sol["max_iters"]),
            floor=float(sol["floor"]),
        )
    else:
        mode = _b.FiniteHorizon(
            T=int(sol["horizon"]), stage_discount=float(sol["stage_discount"])
        )
    problem = _b.ProblemSpec(
        dynamics=_b.dynamics_from_dict(prob["dynamics"]),
        cost=_b.cost_from_dict(prob["cost"]),
        terminal=_b.terminal_from_dict(prob["terminal"]),
        noise=_b.density_from_dict(prob["noise"]),
        sampling=_b.density_from_dict(prob["sampling"]),
        state_space=_m.StateSpace(box=np.array(prob["state_box"], dtype=float)),
        control_space=_b.control_space_from_dict(prob["control_space"]),
        mode=mode,
    )
    problem.validate()
    return problem


def build_constraints(effective: dict, problem: _b.ProblemSpec):
    cons = effective.get("constraints")
    if cons is None:
        return None
    if cons.get("unsafe_boxes") is not None:
        safe = SafeSet.from_boxes(cons["unsafe_boxes"], "unsafe", problem.state_space)
    else:
        safe = SafeSet.from_boxes(cons["safe_boxes"], "safe", problem.state_space)
    return ConstraintSpec(
        safe_set=safe,
        epsilon=float(cons["epsilon"]),
        infeasible_mode=cons["infeasible_mode"],
        infeasible_value=cons["infeasible_value"],
    )


def build_options(effective: dict) -> _b.SolverOptions:
    sol = effective["solver"]
    threads = sol.get("threads")
    if threads is None:
        threads = os.cpu_count() or 1
    return _b.SolverOptions(
        threads=int(threads),
        cache_mode=sol["cache_mode"],
        on_no_overlap=sol["on_no_overlap"],
    )


# ---------------------------------------------------------------------------
# Artifact writers


def _seeds_comment(seeds: dict) -> str:
    return (
        f"seeds particles={seeds['particles']} "
        f"controls={seeds['controls']} noise={seeds['noise']}"
    )


def _open_artifact(path: Path, seeds: dict):
    fh = open(path, "w", newline="")
    fh.write(f"# particledp {__version__} {_seeds_comment(seeds)}\n")
    return fh


def write_policy_map(path: Path, sol: _b.PolicySolution, seeds: dict) -> None:
    r_x, r_u = sol.cloud.r_x, sol.grid.r_u
    infeasible = (
        sol.constraints.infeasible_mask(sol.cloud.n)
        if sol.constraints is not None
        else np.zeros(sol.cloud.n, dtype=bool)
    )
    final = sol.final_weights.values
    with _open_artifact(path, seeds) as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["particle_index"]
            + [f"x_{d + 1}" for d in range(r_x)]
            + [f"u_{d + 1}" for d in range(r_u)]
            + ["value", "feasible"]
        )
        for j in range(sol.cloud.n):
            q = int(sol.argmin_indices[j])
            if infeasible[j] or q < 0:
                u_cols = [""] * r_u
                feas = 0
            else:
                u_cols = [repr(float(v)) for v in sol.grid.controls[q]]
                feas = 1
            writer.writerow(
                [j]
                + [repr(float(v)) for v in sol.cloud.points[j]]
                + u_cols
                + [repr(float(final[j])), feas]
            )


def write_feasibility(path: Path, sol: _b.PolicySolution, initial_unsafe: set, seeds: dict) -> None:
    r_x = sol.cloud.r_x
    mask = sol.constraints.infeasible_mask(sol.cloud.n)
    with _open_artifact(path, seeds) as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["particle_index"]
            + [f"x_{d + 1}" for d in range(r_x)]
            + ["feasible", "in_initial_unsafe"]
        )
        for j in range(sol.cloud.n):
            writer.writerow(
                [j]
                + [repr(float(v)) for v in sol.cloud.points[j]]
                + [0 if mask[j] else 1, 1 if j in initial_unsafe else 0]
            )


def write_weight_stages(out_dir: Path, sol: _b.PolicySolution, seeds: dict) -> list:
    names = []
    if sol.is_finite_horizon:
        for wv in sol.weights:
            name = f"weights_stage_{wv.stage_or_iteration}.csv"
            _write_weight_vector(out_dir / name, sol, wv, seeds)
            names.append(name)
    _write_weight_vector(out_dir / "weights_final.csv", sol, sol.final_weights, seeds)
    names.append("weights_final.csv")
    return names


def _write_weight_vector(path: Path, sol: _b.PolicySolution, wv: _b.WeightVector, seeds: dict) -> None:
    with _open_artifact(path, seeds) as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["particle_index"]
            + [f"x_{d + 1}" for d in range(sol.cloud.r_x)]
            + ["weight"]
        )
        for j in range(sol.cloud.n):
            writer.writerow(
                [j]
                + [repr(float(v)) for v in sol.cloud.points[j]]
                + [repr(float(wv.values[j]))]
            )


# ---------------------------------------------------------------------------
# solve


def _resolve_out_dir(effective: dict, flag_value) -> Path:
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(effective["output"]["directory"])


def cmd_solve(args) -> int:
    t_start = time.perf_counter()
    try:
        effective = validate_config(load_config(args.config))
        effective = _apply_flag_overrides(effective, args)
        effective = apply_overrides(effective, args.set or [])
        effective = validate_config(effective)  # re-check after overrides
        problem = build_problem(effective)
        constraint = build_constraints(effective, problem)
        options = build_options(effective)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = _resolve_out_dir(effective, args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = effective["solver"]["seeds"]
    sol_blk = effective["solver"]

    report = {
        "version": __version__,
        "report_format": 1,
        "command": "solve",
        "config_echo": effective,
        "mode": sol_blk["mode"],
        "seeds": seeds,
        "converged": False,
        "exit_reason": None,
        "n_iterations": 0,
        "iterations": [],
        "artifacts": [],
    }

    try:
        t_setup = time.perf_counter()
        cloud = draw_particles(
            problem.sampling, problem.state_space, sol_blk["n_particles"], seeds["particles"]
        )
        grid = sample_control_grid(problem.control_space, seeds["controls"])
        report["n_particles"] = cloud.n
        report["n_controls"] = grid.n
        setup_s = time.perf_counter() - t_setup

        t_solve = time.perf_counter()
        reports = []
        exit_code = EXIT_OK
        try:
            if sol_blk["mode"] == "discounted":
                init = None
                if sol_blk["init"] == "zero":
                    init = np.zeros(cloud.n)
                solution, reports = _b.value_iteration(
                    problem, cloud, grid, init=init, constraint=constraint, options=options
                )
            else:
                solution = _b.solve_finite_horizon(
                    problem, cloud, grid, constraint=constraint, options=options
                )
            report["converged"] = solution.converged
            report["exit_reason"] = "converged" if solution.converged else "not_converged"
            if not solution.converged:
                exit_code = EXIT_SOLVER
        except AllInfeasibleError as exc:
            report["exit_reason"] = "all_infeasible"
            report["error"] = str(exc)
            _finish_report(report, out_dir, t_start, setup_s, time.perf_counter() - t_solve)
            print(f"solver failed: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        solve_s = time.perf_counter() - t_solve

        report["n_iterations"] = solution.n_iterations
        report["iterations"] = [
            {
                "iteration": r.iteration,
                "max_abs_relative_change": r.max_abs_relative_change,
                "sup_abs_change": r.sup_abs_change,
                "wall_time_ms": r.wall_time * 1e3,
            }
            for r in reports
        ]
        if constraint is not None:
            from .constraints import initialize_infeasible_set

            initial = initialize_infeasible_set(cloud, constraint.safe_set)
            report["n_infeasible_initial"] = len(initial)
            report["n_infeasible_final"] = len(constraint.infeasible)
        else:
            initial = set()

        exports = set(effective["output"]["exports"])
        if "particles" in exports:
            cloud.to_csv(
                out_dir / "particles.csv",
                version=__version__,
                extra_comment=_seeds_comment(seeds),
            )
            report["artifacts"].append("particles.csv")
        if "weights" in exports:
            report["artifacts"].extend(write_weight_stages(out_dir, solution, seeds))
        if "policy_map" in exports:
            write_policy_map(out_dir / "policy_map.csv", solution, seeds)
            report["artifacts"].append("policy_map.csv")
        if "feasibility" in exports and constraint is not None:
            write_feasibility(out_dir / "feasibility.csv", solution, initial, seeds)
            report["artifacts"].append("feasibility.csv")
        if "solution" in exports:
            _b.save_solution(solution, out_dir / "solution.zip", version=__version__)
            report["artifacts"].append("solution.zip")

        if effective["output"]["fit_quadratic"]:
            feasible = (
                ~constraint.infeasible_mask(cloud.n)
                if constraint is not None
                else np.ones(cloud.n, dtype=bool)
            )
            fit = fit_quadratic(
                cloud.points[feasible], solution.final_weights.values[feasible]
            )
            report["quadratic_fit"] = {
                "a2": fit.a2.tolist(),
                "a1": fit.a1.tolist(),
                "a0": fit.a0,
                "residual_rms": fit.residual_rms,
            }
            if cloud.r_x == 1:
                print(
                    f"fitted quadratic: V(x) = {fit.a2_scalar:.4f} x^2 "
                    f"{fit.a1_scalar:+.4f} x + {fit.a0:.4f}"
                )

        _finish_report(report, out_dir, t_start, setup_s, solve_s)
        status = "converged" if report["converged"] else report["exit_reason"]
        print(
            f"solve: {status} after {report['n_iterations']} "
            f"{'iterations' if sol_blk['mode'] == 'discounted' else 'stages'}; "
            f"artifacts in {out_dir}"
        )
        return exit_code
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (_b.InfeasibleStateError,) as exc:
        report["exit_reason"] = "infeasible_state"
        report["error"] = str(exc)
        _finish_report(report, out_dir, t_start, 0.0, 0.0)
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _finish_report(report: dict, out_dir: Path, t_start: float, setup_s: float, solve_s: float) -> None:
    report["timings"] = {
        "setup_s": setup_s,
        "solve_s": solve_s,
        "total_s": time.perf_counter() - t_start,
    }
    report["artifacts"].append("report.json")
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_flag_overrides(effective: dict, args) -> dict:
    sol = effective["solver"]
    if getattr(args, "mode", None):
        sol["mode"] = args.mode
    if getattr(args, "T", None) is not None:
        sol["horizon"] = args.T
    if getattr(args, "alpha", None) is not None:
        sol["alpha"] = args.alpha
    if getattr(args, "tol", None) is not None:
        sol["tol"] = args.tol
    if getattr(args, "n_particles", None) is not None:
        sol["n_particles"] = args.n_particles
    if getattr(args, "threads", None) is not None:
        sol["threads"] = args.threads
    if getattr(args, "epsilon", None) is not None:
        if effective.get("constraints") is None:
            raise ConfigError("--epsilon", "config has no constraints block to override")
        effective["constraints"]["epsilon"] = args.epsilon
    return effective


# ---------------------------------------------------------------------------
# eval


def _parse_state(text: str, r_x: int) -> np.ndarray:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != r_x:
        raise ConfigurationError(f"state {text!r} has {len(vals)} coordinates, expected {r_x}")
    return np.array(vals)


def _grid_states(spec: str, box: np.ndarray) -> np.ndarray:
    counts = [int(v) for v in spec.lower().split("x")]
    if len(counts) != box.shape[0]:
        raise ConfigurationError(
            f"--grid {spec!r} has {len(counts)} factors but the state dimension is {box.shape[0]}"
        )
    axes = [np.linspace(box[d, 0], box[d, 1], counts[d]) for d in range(box.shape[0])]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def cmd_eval(args) -> int:
    try:
        sol = _b.load_solution(args.solution)
    except Exception as exc:
        print(f"cannot load solution archive: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if isinstance(sol.problem.mode, _b.FiniteHorizon):
        if not (0 <= args.stage < sol.problem.mode.T):
            print(
                f"--stage must lie in [0, {sol.problem.mode.T}) for this solution",
                file=sys.stderr,
            )
            return EXIT_CONFIG
    r_x, r_u = sol.cloud.r_x, sol.grid.r_u

    try:
        states = []
        if args.state:
            states.extend(_parse_state(s, r_x) for s in args.state)
        if args.states_file:
            with open(args.states_file, newline="") as fh:
                for line in fh:
                    line = line.strip()
                    if not line or line.startswith("#") or line.lower().startswith("x_1"):
                        continue
                    states.append(_parse_state(line, r_x))
        if args.grid:
            states.extend(_grid_states(args.grid, sol.problem.state_space.box))
    except ConfigurationError as exc:
        print(f"bad query states: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    inside_idx = [i for i, x in enumerate(states) if sol.problem.state_space.contains(x)]
    results = {}
    if inside_idx:
        batch = np.stack([states[i] for i in inside_idx])
        values, controls, feasible = _b.eval_many(sol, batch, stage=args.stage)
        for pos, i in enumerate(inside_idx):
            results[i] = (values[pos], controls[pos], bool(feasible[pos]))

    out_fh = open(args.output, "w", newline="") if args.output else sys.stdout
    out_fh.write(
        f"# particledp {__version__} eval cloud_seed={sol.cloud.seed} "
        f"grid_seed={sol.grid.seed} stage={args.stage}\n"
    )
    writer = csv.writer(out_fh)
    writer.writerow(
        [f"x_{d + 1}" for d in range(r_x)]
        + ["value"]
        + [f"u_{d + 1}" for d in range(r_u)]
        + ["feasible", "error"]
    )
    n_err = 0
    for i, x in enumerate(states):
        base = [repr(float(v)) for v in x]
        if i not in results:
            writer.writerow(base + [""] + [""] * r_u + ["", "outside_state_space"])
            n_err += 1
            continue
        value, control, ok = results[i]
        if ok:
            writer.writerow(
                base + [repr(float(value))] + [repr(float(v)) for v in control] + [1, ""]
            )
        else:
            writer.writerow(base + [""] + [""] * r_u + [0, ""])
    if args.output:
        out_fh.close()
    if states and n_err == len(states):
        print("all query states failed", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


# ---------------------------------------------------------------------------
# rollout


def cmd_rollout(args) -> int:
    try:
        sol = _b.load_solution(args.solution)
        x0 = _parse_state(args.x0, sol.cloud.r_x)
    except Exception as exc:
        print(f"rollout setup failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        traj = _b.simulate_rollout(sol, x0, args.steps, args.seed, zero_noise=args.zero_noise)
    except ConfigurationError as exc:
        print(f"rollout failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    r_x, r_u = sol.cloud.r_x, sol.grid.r_u
    out_fh = open(args.output, "w", newline="") if args.output else sys.stdout
    out_fh.write(f"# particledp {__version__} rollout seed={args.seed} x0={args.x0!r}\n")
    writer = csv.writer(out_fh)
    writer.writerow(
        ["k"]
        + [f"x_{d + 1}" for d in range(r_x)]
        + [f"u_{d + 1}" for d in range(r_u)]
        + ["stage_cost", "feasible"]
    )
    n = traj.n_steps
    for k in range(n + 1):
        row = [k] + [repr(float(v)) for v in traj.states[k]]
        if k < n:
            row += [repr(float(v)) for v in traj.controls[k]]
            row += [repr(float(traj.costs[k])), 1]
        else:
            row += [""] * r_u + ["", 0 if traj.truncated_reason else 1]
        writer.writerow(row)
    if args.output:
        out_fh.close()
    if traj.truncated_reason:
        print(f"rollout truncated: {traj.truncated_reason}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


_SUITES = {
    "riccati": lambda: riccati_battery(),
    "contraction": lambda: contraction_battery(),
    "tiny": lambda: tiny_dp_battery(),
    "is": lambda: is_consistency_battery(),
}


def cmd_verify(args) -> int:
    if args.suite != "all" and args.suite not in _SUITES:
        print(
            f"unknown suite {args.suite!r}; expected one of "
            f"{sorted(_SUITES) + ['all']}",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    names = sorted(_SUITES) if args.suite == "all" else [args.suite]
    results = []
    all_pass = True
    for name in names:
        res = _SUITES[name]()
        results.append(res.to_dict())
        all_pass &= res.passed
        print(
            f"[{'PASS' if res.passed else 'FAIL'}] {res.name}: "
            f"{res.n_pass}/{res.n_cases} cases, max violation {res.max_violation:.3g}"
        )
    payload = {"version": __version__, "suites": results, "passed": all_pass}
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        print(json.dumps(payload, sort_keys=True))
    return EXIT_OK if all_pass else EXIT_INTERNAL


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="particledp",
        description="Meshless Monte-Carlo dynamic programming solver",
    )
    parser.add_argument("--version", action="version", version=f"particledp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve a problem described by a config file")
    p_solve.add_argument("config", help="config file path or bundled name (example1, example2)")
    p_solve.add_argument("--output", "-o", help="artifact directory (overrides env and config)")
    p_solve.add_argument("--mode", choices=["discounted", "finite"])
    p_solve.add_argument("--T", type=int, help="finite horizon length")
    p_solve.add_argument("--alpha", type=float, help="discount factor")
    p_solve.add_argument("--tol", type=float, help="convergence tolerance")
    p_solve.add_argument("--n-particles", type=int, dest="n_particles")
    p_solve.add_argument("--epsilon", type=float, help="chance-constraint violation probability")
    p_solve.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p_solve.add_argument(
        "--set",
        action="append",
        metavar="PATH=JSON",
        help="override any config key, e.g. --set solver.seeds.particles=7",
    )
    p_solve.set_defaults(func=cmd_solve)

    p_eval = sub.add_parser("eval", help="evaluate a saved solution at query states")
    p_eval.add_argument("solution", help="solution.zip produced by solve")
    p_eval.add_argument("--state", action="append", help="inline state, e.g. --state '1.0,2.0'")
    p_eval.add_argument("--states-file", help="CSV/whitespace file with one state per line")
    p_eval.add_argument("--grid", help="evaluation grid over the state box, e.g. 101x101")
    p_eval.add_argument("--stage", type=int, default=0, help="stage for finite-horizon solutions")
    p_eval.add_argument("--output", "-o", help="output CSV (default: stdout)")
    p_eval.set_defaults(func=cmd_eval)

    p_roll = sub.add_parser("rollout", help="closed-loop simulation under a saved policy")
    p_roll.add_argument("solution")
    p_roll.add_argument("--x0", required=True, help="initial state, e.g. '5.0' or '1,2'")
    p_roll.add_argument("--steps", type=int, default=50)
    p_roll.add_argument("--seed", type=int, default=0, help="noise seed")
    p_roll.add_argument("--zero-noise", action="store_true", help="suppress process noise")
    p_roll.add_argument("--output", "-o", help="trajectory CSV (default: stdout)")
    p_roll.set_defaults(func=cmd_rollout)

    p_ver = sub.add_parser("verify", help="run oracle verification batteries")
    p_ver.add_argument("suite", help="riccati | contraction | tiny | is | all")
    p_ver.add_argument("--output", "-o", help="write the JSON report here")
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - internal failure path
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
