"""Command-line front end: ``tocol {solve,mpc,compare} SCENARIO``.

Scenarios are YAML documents. Example::

    system: vdp
    x_start: [0, 0]
    target: [0.8, 0]          # "free" leaves a component unconstrained
    u_bounds: [-1, 1]
    x_bounds: [[-.inf, -0.7], [.inf, 0.7]]
    N: 15
    param: constant
    mpc: {N0: 15, N_min: 4, dt_min: 0.001, radius: 0.02}

Exit status is 0 on success, 2 when a solve is not optimal (or the closed
loop does not converge) and 1 on invalid input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import yaml

from . import __version__
from .mpc import (
    MpcConfig,
    check_optimality_principle,
    cost_bound_sampling,
    lyapunov_decrease_report,
    run_closed_loop,
)
from .solver import SolverConfig
from .systems import (
    PropagationError,
    PropagatorConfig,
    SystemModel,
    make_double_integrator,
    make_linear,
    make_rocket,
    make_vdp,
    make_vdp_mismatch,
)
from .trajectory import (
    DEFAULT_SAMPLES,
    dynamics_error,
    export_csv,
    solve_ocp,
    total_variation,
    violation_profile,
)
from .transcription import (
    CollocationForm,
    ControlParam,
    OcpSpec,
    SpecError,
    TargetSpec,
    assemble_nlp,
    layout_variables,
)

log = logging.getLogger("tocol")

EXIT_OK, EXIT_INPUT, EXIT_NOT_OPTIMAL = 0, 1, 2

SYSTEMS = {"vdp": make_vdp, "rocket": make_rocket, "double_integrator": make_double_integrator}

TOP_KEYS = {
    "name", "system", "linear", "x_start", "target", "u_bounds", "x_bounds", "N", "dt_min",
    "dt_max", "param", "form", "time_per_distance", "samples", "solver", "propagator", "mpc",
}
SOLVER_KEYS = {
    "kkt_tol", "constraint_tol", "max_outer_iters", "max_inner_iters", "penalty_init",
    "penalty_growth", "fd_step",
}
PROPAGATOR_KEYS = {"method", "abs_tol", "rel_tol", "max_steps", "step"}
MPC_KEYS = {
    "N0", "N_min", "dt_min", "dt_max", "radius", "max_steps", "warm_start", "hold_steps",
    "plant", "tol", "cost_samples", "sample_box",
}
PLANT_KEYS = {"damping"}


class ScenarioError(ValueError):
    """Invalid scenario document."""


# ---------------------------------------------------------------------------
# scenario parsing


def _num(v, key: str) -> float:
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "-inf", ".inf", "-.inf"):
        return -math.inf if v.strip().startswith("-") else math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{key}: expected a number, got {v!r}")
    return float(v)


def _vec(v, key: str) -> list:
    if not isinstance(v, (list, tuple)):
        return [_num(v, key)]
    return [_num(x, f"{key}[{i}]") for i, x in enumerate(v)]


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    for k in d:
        if k not in allowed:
            raise ScenarioError(f"unknown key {k!r} in {where}")


def _int(v, key: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(f"{key}: expected an integer, got {v!r}")
    return v


@dataclass
class Scenario:
    raw: dict
    spec: OcpSpec
    solver: SolverConfig
    propagator: PropagatorConfig
    samples: int
    time_per_distance: float
    mpc: Optional[dict]


def load_scenario(path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ScenarioError(f"cannot parse scenario{where}: {exc}") from exc
    return parse_scenario(raw)


def _build_model(raw: dict) -> SystemModel:
    name = raw.get("system")
    if name == "linear":
        lin = raw.get("linear")
        _check_keys(lin, {"A", "B"}, "linear")
        try:
            A = np.array([[_num(a, "linear.A") for a in row] for row in lin["A"]])
            B = np.array([[_num(b, "linear.B") for b in row] for row in lin["B"]])
            return make_linear(A, B)
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"linear: {exc}") from exc
    if name not in SYSTEMS:
        raise ScenarioError(f"system: expected one of {sorted(SYSTEMS) + ['linear']}, got {name!r}")
    if "linear" in raw:
        raise ScenarioError("key 'linear' is only valid with system: linear")
    return SYSTEMS[name]()


def parse_scenario(raw: Any) -> Scenario:
    """Validate a parsed scenario document and build the problem objects."""
    _check_keys(raw, TOP_KEYS, "scenario")
    for req in ("system", "x_start", "target", "u_bounds"):
        if req not in raw:
            raise ScenarioError(f"missing required key {req!r}")
    model = _build_model(raw)
    target_raw = raw["target"]
    if not isinstance(target_raw, list):
        raise ScenarioError("target: expected a list")
    target = TargetSpec(tuple(None if v == "free" else _num(v, "target") for v in target_raw))

    ub = raw["u_bounds"]
    if not (isinstance(ub, list) and len(ub) == 2):
        raise ScenarioError("u_bounds: expected [lower, upper]")
    u_bounds = tuple(_vec(b, "u_bounds") for b in ub)
    x_bounds = None
    if "x_bounds" in raw:
        xb = raw["x_bounds"]
        if not (isinstance(xb, list) and len(xb) == 2):
            raise ScenarioError("x_bounds: expected [lower, upper]")
        x_bounds = tuple(_vec(b, "x_bounds") for b in xb)

    try:
        param = ControlParam(raw.get("param", "constant"))
        form = CollocationForm(raw.get("form", "compressed"))
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc

    solver_raw = raw.get("solver", {}) or {}
    _check_keys(solver_raw, SOLVER_KEYS, "solver")
    prop_raw = raw.get("propagator", {}) or {}
    _check_keys(prop_raw, PROPAGATOR_KEYS, "propagator")
    mpc_raw = raw.get("mpc")
    if mpc_raw is not None:
        _check_keys(mpc_raw, MPC_KEYS, "mpc")
        if "plant" in mpc_raw:
            _check_keys(mpc_raw["plant"], PLANT_KEYS, "mpc.plant")
    try:
        spec = OcpSpec(
            model, _vec(raw["x_start"], "x_start"), target, u_bounds, x_bounds=x_bounds,
            N=_int(raw.get("N", 10), "N"), dt_min=_num(raw.get("dt_min", 0.0), "dt_min"),
            dt_max=_num(raw.get("dt_max", math.inf), "dt_max"), param=param, form=form,
        )
        solver = SolverConfig(**{
            k: (_int(v, k) if k.startswith("max_") else _num(v, k)) for k, v in solver_raw.items()
        })
        propagator = PropagatorConfig(**{
            k: v if k == "method" else (_int(v, k) if k == "max_steps" else _num(v, k))
            for k, v in prop_raw.items()
        })
    except (SpecError, ValueError, TypeError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc
    samples = _int(raw.get("samples", DEFAULT_SAMPLES), "samples")
    if samples < 10:
        raise ScenarioError("samples: need at least 10 per partition")
    tpd = _num(raw.get("time_per_distance", 1.0), "time_per_distance")
    return Scenario(raw, spec, solver, propagator, samples, tpd, mpc_raw)


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    return v


# ---------------------------------------------------------------------------
# output helpers


def atomic_write(path: Path, write: Callable[[io.TextIOBase], None]) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, data: dict) -> None:
    atomic_write(path, lambda fh: json.dump(_jsonable(data), fh, indent=2, allow_nan=False))


def write_rows(path: Path, header: list, rows) -> None:
    def w(fh):
        out = csv.writer(fh)
        out.writerow(header)
        for r in rows:
            out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])

    atomic_write(path, w)


# ---------------------------------------------------------------------------
# commands


def _solve(sc: Scenario, spec: Optional[OcpSpec] = None):
    return solve_ocp(spec or sc.spec, sc.solver, time_per_distance=sc.time_per_distance)


def cmd_solve(sc: Scenario, out: Path, echo: Callable) -> int:
    t0 = time.perf_counter()
    sol = _solve(sc)
    wall = time.perf_counter() - t0
    res = sol.solver
    atomic_write(out / "solution.csv", lambda fh: export_csv(sol, fh, sc.samples))
    vr = violation_profile(sol, sc.samples)
    write_rows(
        out / "violations.csv", ["constraint", "max_violation", "time"],
        [(n, v, t) for n, v, t in zip(vr.names, vr.max_violation, vr.argmax_time)],
    )
    summary = {
        "command": "solve",
        "scenario": sc.raw,
        "status": res.status.value,
        "t_f_star": sol.t_f_star,
        "dt_star": sol.dt_star,
        "iterations": res.iterations,
        "function_evals": res.function_evals,
        "kkt_residual": res.kkt_residual,
        "constraint_violation": res.constraint_violation,
        "wall_time": wall,
        "x_final": sol.state_spline.x_grid[-1],
        "max_intersample_violation": vr.worst,
        "total_variation": total_variation(sol, sc.samples),
    }
    try:
        err = dynamics_error(sol, sc.propagator, sc.samples)
        write_rows(
            out / "dynamics_error.csv", ["t", "deviation", "integral"],
            zip(err.t, err.deviation, err.integral),
        )
        summary["dynamics_error"] = err.final
        summary["terminal_mismatch"] = err.terminal_mismatch
    except PropagationError as exc:
        summary["dynamics_error"] = None
        summary["propagation_error"] = str(exc)
    write_json(out / "summary.json", summary)
    echo(f"{res.status.value}: t_f* = {sol.t_f_star:.6g} ({res.iterations} iterations, {wall:.2f} s)")
    return EXIT_OK if res.success else EXIT_NOT_OPTIMAL


def _mpc_config(sc: Scenario) -> tuple[MpcConfig, SystemModel, float]:
    m = sc.mpc
    spec = sc.spec
    try:
        cfg = MpcConfig(
            template=spec,
            N0=_int(m.get("N0", spec.N), "mpc.N0"),
            N_min=_int(m.get("N_min", 1), "mpc.N_min"),
            dt_min=_num(m.get("dt_min", spec.dt_min), "mpc.dt_min"),
            dt_max=_num(m.get("dt_max", spec.dt_max), "mpc.dt_max"),
            param=spec.param,
            form=spec.form,
            convergence_radius=_num(m.get("radius", 0.02), "mpc.radius"),
            max_steps=_int(m.get("max_steps", 200), "mpc.max_steps"),
            warm_start=bool(m.get("warm_start", True)),
            hold_steps=_int(m.get("hold_steps", 0), "mpc.hold_steps"),
            solver=sc.solver,
            propagator=sc.propagator,
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"mpc: {exc}") from exc
    plant = spec.model
    damping = (m.get("plant") or {}).get("damping")
    if damping is not None:
        if spec.model.name != "vdp":
            raise ScenarioError("mpc.plant.damping applies to the vdp system only")
        plant = make_vdp_mismatch(_num(damping, "mpc.plant.damping"))
    tol = _num(m.get("tol", 1e-3), "mpc.tol")
    return cfg, plant, tol


def cmd_mpc(sc: Scenario, out: Path, echo: Callable, seed: Optional[int]) -> int:
    if sc.mpc is None:
        raise ScenarioError("scenario has no 'mpc' block")
    cfg, plant, tol = _mpc_config(sc)
    t0 = time.perf_counter()
    clog = run_closed_loop(sc.spec.x_start, plant, cfg)
    wall = time.perf_counter() - t0
    atomic_write(out / "closed_loop.csv", clog.to_csv)
    opt = check_optimality_principle(clog, tol)
    write_rows(
        out / "optimality_principle.csv", ["n", "deviation", "passed"],
        [(n, d, bool(p)) for n, d, p in zip(opt.steps, opt.deviations, opt.passed)],
    )
    lyap = lyapunov_decrease_report(clog, tol=tol)
    write_rows(
        out / "lyapunov.csv", ["n", "V", "decrease", "phase", "decrease_ok", "dt_ok"],
        zip(lyap.steps, lyap.V, lyap.decrease, lyap.phase, map(bool, lyap.decrease_ok), map(bool, lyap.dt_ok)),
    )
    summary = {
        "command": "mpc",
        "scenario": sc.raw,
        "final_status": clog.final_status,
        "steps": len(clog),
        "t_final": clog.t_final,
        "x_final": clog.x_final,
        "distance_final": sc.spec.target.distance(clog.x_final),
        "optimality_principle_worst": opt.worst,
        "optimality_principle_passed": opt.all_passed,
        "lyapunov_passed": lyap.all_passed,
        "wall_time": wall,
    }
    n_samples = _int(sc.mpc.get("cost_samples", 0), "mpc.cost_samples")
    if n_samples:
        box = sc.mpc.get("sample_box", [-1.0, 1.0])
        lo, hi = (_vec(b, "mpc.sample_box") for b in box)
        rng = np.random.default_rng(seed)
        states = rng.uniform(lo, hi, size=(n_samples, sc.spec.model.p))
        template = replace(sc.spec, dt_min=0.0)
        data = cost_bound_sampling(template, states, sc.solver)
        write_rows(
            out / "cost_bounds.csv",
            [f"x{i + 1}" for i in range(sc.spec.model.p)] + ["distance", "t_f_star"],
            [list(s) + [d, c] for s, d, c in zip(data.states, data.distances, data.costs)],
        )
        summary["cost_samples"] = {"kept": int(data.costs.size), "infeasible": data.n_infeasible, "seed": seed}
    write_json(out / "summary.json", summary)
    echo(f"{clog.final_status}: {len(clog)} steps, t = {clog.t_final:.6g}, worst deviation {opt.worst:.3g}")
    return EXIT_OK if clog.final_status == "converged" else EXIT_NOT_OPTIMAL


def cmd_compare(sc: Scenario, out: Path, echo: Callable) -> int:
    p = sc.spec.model.p
    q = sc.spec.model.q
    header = ["param", "form", "status", "t_f_star", "n_z", "m_e", "iterations", "wall_time", "max_violation"]
    header += [f"tv_u{j + 1}" for j in range(q)]
    rows = []
    all_ok = True
    for param in ControlParam:
        for form in CollocationForm:
            spec = replace(sc.spec, param=param, form=form)
            layout = layout_variables(spec)
            nlp = assemble_nlp(spec)
            t0 = time.perf_counter()
            try:
                sol = _solve(sc, spec)
            except (ArithmeticError, ValueError, PropagationError) as exc:
                log.warning("%s/%s failed: %s", param.value, form.value, exc)
                rows.append([param.value, form.value, "error", math.nan, layout.n_z, nlp.m_e, 0,
                             time.perf_counter() - t0, math.nan] + [math.nan] * q)
                all_ok = False
                continue
            wall = time.perf_counter() - t0
            res = sol.solver
            all_ok &= res.success
            vr = violation_profile(sol, sc.samples)
            tv = total_variation(sol, sc.samples)
            rows.append([param.value, form.value, res.status.value, sol.t_f_star, layout.n_z, nlp.m_e,
                         res.iterations, wall, vr.worst] + list(tv))
            atomic_write(
                out / "variants" / f"{param.value}_{form.value}.csv",
                lambda fh, s=sol: export_csv(s, fh, sc.samples),
            )
            echo(f"{param.value:>9} {form.value:>12}: {res.status.value} t_f* = {sol.t_f_star:.6g}")
    write_rows(out / "compare.csv", header, rows)
    write_json(out / "summary.json", {"command": "compare", "scenario": sc.raw, "p": p, "all_optimal": all_ok})
    return EXIT_OK if all_ok else EXIT_NOT_OPTIMAL


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario YAML file")
    common.add_argument("--out", help="output directory (default: $TOCOL_OUT or ./tocol_out)")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized sampling")
    common.add_argument("--quiet", action="store_true", help="suppress console output")
    parser = argparse.ArgumentParser(prog="tocol", description="Minimum-time trajectory optimization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one scenario")
    sub.add_parser("mpc", parents=[common], help="run the shrinking-horizon closed loop")
    sub.add_parser("compare", parents=[common], help="solve under every parameterization and form")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    echo = (lambda msg: None) if args.quiet else print
    out = Path(args.out or os.environ.get("TOCOL_OUT") or "tocol_out")
    try:
        sc = load_scenario(args.scenario)
        if args.command == "solve":
            return cmd_solve(sc, out, echo)
        if args.command == "mpc":
            return cmd_mpc(sc, out, echo, args.seed)
        return cmd_compare(sc, out, echo)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
