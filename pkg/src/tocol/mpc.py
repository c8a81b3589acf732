"""Shrinking-horizon minimum-time feedback and its closed-loop diagnostics.

At every sampling instant the minimum-time problem is re-solved from the
measured state, the first optimized partition of the control is applied for
exactly ``dt*`` and the horizon shrinks by one partition down to a floor.
Because ``dt`` is bounded below, the target itself is generally unreachable
and the loop settles in a small neighbourhood of it.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .solver import SolverConfig, Status
from .systems import PropagatorConfig, SystemModel, propagate
from .transcription import (
    CollocationForm,
    ControlParam,
    OcpSpec,
    SpecError,
    initial_guess,
    layout_variables,
)
from .trajectory import Solution, solve_ocp

logger = logging.getLogger(__name__)


class MpcStepError(RuntimeError):
    """The optimal control problem of one MPC step could not be solved."""

    def __init__(self, message: str, solution: Optional[Solution] = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class MpcConfig:
    """Closed-loop settings.

    ``template`` supplies the model, target and constraints; its start state
    and grid settings are overridden per step.
    """

    template: OcpSpec
    N0: int = 15
    N_min: int = 4
    dt_min: float = 1e-3
    dt_max: float = np.inf
    param: ControlParam = ControlParam.CONSTANT
    form: CollocationForm = CollocationForm.COMPRESSED
    convergence_radius: float = 0.02
    max_steps: int = 200
    warm_start: bool = True
    hold_steps: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    propagator: PropagatorConfig = field(default_factory=PropagatorConfig)

    def __post_init__(self):
        object.__setattr__(self, "param", ControlParam(self.param))
        object.__setattr__(self, "form", CollocationForm(self.form))
        if not 1 <= self.N_min <= self.N0:
            raise ValueError("need 1 <= N_min <= N0")
        if not 0.0 <= self.dt_min <= self.dt_max:
            raise ValueError("need 0 <= dt_min <= dt_max")
        if not self.convergence_radius > 0:
            raise ValueError("convergence_radius must be positive")
        if self.hold_steps < 0:
            raise ValueError("hold_steps must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def spec_for(self, state, N: int) -> OcpSpec:
        state = np.asarray(state, dtype=float)
        lo, hi = self.template.x_bounds
        # closed-loop states may sit on a bound up to integration error
        state = np.where((state < lo) & (state > lo - 1e-6), lo, state)
        state = np.where((state > hi) & (state < hi + 1e-6), hi, state)
        return replace(
            self.template, x_start=state, N=N, dt_min=self.dt_min, dt_max=self.dt_max,
            param=self.param, form=self.form,
        )

    def clamped(self, dt: float) -> bool:
        return dt <= self.dt_min * (1.0 + 1e-6) + 1e-12


@dataclass(frozen=True)
class AppliedSegment:
    """First partition of a solution's control, shifted to start at 0."""

    duration: float
    solution: Solution

    @property
    def breakpoints(self) -> np.ndarray:
        b = self.solution.control_spline.breakpoints
        return b[b <= self.duration]

    def __call__(self, tau):
        return self.solution.control_spline(np.minimum(tau, self.duration))


def shift_guess(prev: Solution, spec: OcpSpec) -> np.ndarray:
    """Warm start for ``spec`` from ``prev`` by dropping its first partition.

    When the horizon did not shrink the last partition is repeated instead.
    """
    old = prev.layout
    new = layout_variables(spec)
    if (old.form, old.param, old.p, old.q) != (new.form, new.param, new.p, new.q):
        return initial_guess(spec)
    dt, X, U = old.unpack(prev.z)
    xs = 2 if old.form is CollocationForm.UNCOMPRESSED else 1
    us = 2 if old.param.has_midpoints else 1
    X, U = X[xs:], U[us:]
    while X.shape[0] < new.n_xpts:
        X = np.vstack([X, X[-xs:]])
    while U.shape[0] < new.n_upts:
        U = np.vstack([U, U[-us:]])
    X = X[: new.n_xpts].copy()
    X[0] = spec.x_start
    dt = float(np.clip(dt, spec.dt_min, spec.dt_max))
    return new.pack(dt, X, U[: new.n_upts])


def mpc_step(state, N: int, cfg: MpcConfig, prev: Optional[Solution] = None):
    """Solve the horizon-``N`` problem from ``state``.

    Returns ``(solution, applied_segment)``. With ``cfg.warm_start`` and a
    previous solution the initial guess is the shifted previous grid.

    Raises
    ------
    ValueError
        If ``N`` is below the horizon floor or ``state`` is not finite.
    MpcStepError
        If the solver does not report an optimal solution.
    """
    if N < cfg.N_min:
        raise ValueError(f"horizon {N} below the floor {cfg.N_min}")
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise ValueError("state must be finite")
    try:
        spec = cfg.spec_for(state, N)
    except SpecError as exc:
        raise MpcStepError(f"invalid problem at the current state: {exc}") from exc
    guesses = []
    if cfg.warm_start and prev is not None and N in (prev.N - 1, prev.N):
        guesses.append(shift_guess(prev, spec))
    # None means a cold start, which carries its own repair fallback
    guesses.append(None)
    for z0 in guesses:
        sol = solve_ocp(spec, cfg.solver, z0)
        if sol.solver.status is Status.OPTIMAL:
            return sol, AppliedSegment(sol.dt_star, sol)
        logger.debug("step from %s failed with %s, retrying", state, sol.solver.status.value)
    raise MpcStepError(f"solver finished with status {sol.solver.status.value}", sol)


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class StepRecord:
    n: int
    t: float
    x: np.ndarray
    N: int
    dt_star: float
    t_f_star: float
    status: str
    wall_time: float
    x_predicted: Optional[np.ndarray] = None


@dataclass
class ClosedLoopLog:
    records: list
    final_status: str
    N_min: int
    dt_min: float
    x_final: Optional[np.ndarray] = None
    t_final: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def states(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    def to_csv(self, target) -> None:
        p = len(self.records[0].x) if self.records else (0 if self.x_final is None else len(self.x_final))
        header = ["n", "t_n"] + [f"x{i + 1}" for i in range(p)] + ["N_n", "dt_star", "t_f_star", "status"]
        rows = [
            [r.n, repr(r.t)] + [repr(float(v)) for v in r.x] + [r.N, repr(r.dt_star), repr(r.t_f_star), r.status]
            for r in self.records
        ]
        if isinstance(target, (str, os.PathLike)):
            with open(target, "w", newline="", encoding="utf-8") as fh:
                _write(fh, header, rows)
        else:
            _write(target, header, rows)


def _write(fh, header, rows) -> None:
    w = csv.writer(fh)
    w.writerow(header)
    w.writerows(rows)


def run_closed_loop(x0, plant: SystemModel, cfg: MpcConfig) -> ClosedLoopLog:
    """Simulate the shrinking-horizon loop on ``plant``.

    The controller predicts with ``cfg.template.model``; ``plant`` may differ
    for mismatch studies. The run stops as ``converged`` once the state is
    inside the convergence ball and the last optimized interval length sat on
    ``dt_min`` (or ``dt_min`` is zero). An initial state already inside the
    ball converges without any step. ``horizon-floor-reached`` means the
    horizon is at its floor with ``dt`` clamped while still outside the ball.
    After convergence ``cfg.hold_steps`` further steps are simulated and
    logged, which exposes the behaviour in the clamped regime.
    """
    x = np.asarray(x0, dtype=float).copy()
    target = cfg.template.target
    N = cfg.N0
    t = 0.0
    prev: Optional[Solution] = None
    records: list[StepRecord] = []
    status = "step-cap"
    hold = None
    for n in range(cfg.max_steps):
        inside = target.distance(x) <= cfg.convergence_radius
        if hold is None and inside and (prev is None or cfg.dt_min == 0.0 or cfg.clamped(prev.dt_star)):
            hold = cfg.hold_steps
        if hold is not None:
            if hold == 0:
                status = "converged"
                break
            hold -= 1
        elif not inside and prev is not None and prev.N == cfg.N_min and cfg.clamped(prev.dt_star):
            status = "horizon-floor-reached"
            break
        t0 = time.perf_counter()
        try:
            sol, seg = mpc_step(x, N, cfg, prev)
        except MpcStepError as exc:
            s = exc.solution
            records.append(StepRecord(
                n, t, x.copy(), N, s.dt_star if s else np.nan, s.t_f_star if s else np.nan,
                s.status if s else "failed", time.perf_counter() - t0,
            ))
            status = "infeasible"
            break
        wall = time.perf_counter() - t0
        x_pred = sol.state_spline(seg.duration)
        records.append(StepRecord(n, t, x.copy(), N, sol.dt_star, sol.t_f_star, sol.status, wall, x_pred))
        if seg.duration > 0.0:
            traj = propagate(plant, x, seg, (0.0, seg.duration), cfg.propagator, breakpoints=seg.breakpoints)
            x = traj.final.copy()
        t += seg.duration
        N = max(N - 1, cfg.N_min)
        prev = sol
    else:
        if hold is not None:
            status = "converged"
    return ClosedLoopLog(records, status, cfg.N_min, cfg.dt_min, x, t)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class OptimalityReport:
    steps: list
    deviations: np.ndarray
    tol: float

    @property
    def passed(self) -> np.ndarray:
        return self.deviations <= self.tol

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    @property
    def worst(self) -> float:
        return float(self.deviations.max(initial=0.0))


def _usable(r: StepRecord) -> bool:
    return r.status == Status.OPTIMAL.value and np.isfinite(r.t_f_star)


def check_optimality_principle(log: ClosedLoopLog, tol: float = 1e-3) -> OptimalityReport:
    """Compare each optimal cost with the previous one minus the applied interval.

    Only consecutive steps whose horizon shrank (``N_n > N_min``) are checked,
    since only then is the tail of the previous grid a candidate solution.
    """
    steps, dev = [], []
    for a, b in zip(log.records, log.records[1:]):
        if a.N > log.N_min and _usable(a) and _usable(b):
            steps.append(a.n)
            dev.append(abs(b.t_f_star - (a.t_f_star - a.dt_star)))
    return OptimalityReport(steps, np.array(dev), tol)


@dataclass
class LyapunovReport:
    steps: list
    V: np.ndarray
    decrease: np.ndarray  # V_n - V_{n+1}
    phase: list  # "pre-floor", "floor" or "clamped"
    decrease_ok: np.ndarray
    dt_ok: np.ndarray

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.decrease_ok) and np.all(self.dt_ok))


def lyapunov_decrease_report(
    log: ClosedLoopLog, alpha_floor: float = 0.0, tol: float = 1e-3
) -> LyapunovReport:
    """Check that the optimal time decreases like a Lyapunov function.

    Before the horizon floor each step must satisfy
    ``V_{n+1} <= V_n - dt_n + tol`` and ``V_n - V_{n+1} >= alpha_floor``. Steps
    at the floor are labelled ``floor`` (decrease reported, not required) or
    ``clamped`` once ``dt`` sits on ``dt_min``. ``dt_n >= dt_min`` is checked
    for every step.
    """
    recs = [r for r in log.records if _usable(r)]
    V = np.array([r.t_f_star for r in recs])
    steps, dec, phase, ok, dt_ok = [], [], [], [], []
    eps = 1e-9 * max(1.0, log.dt_min)
    for i, r in enumerate(recs):
        steps.append(r.n)
        dt_ok.append(r.dt_star >= log.dt_min - eps)
        if r.N > log.N_min:
            phase.append("pre-floor")
        elif r.dt_star <= log.dt_min * (1 + 1e-6) + 1e-12:
            phase.append("clamped")
        else:
            phase.append("floor")
        if i + 1 < len(recs):
            d = V[i] - V[i + 1]
            dec.append(d)
            if phase[-1] == "pre-floor":
                ok.append(V[i + 1] <= V[i] - r.dt_star + tol and d >= alpha_floor)
            else:
                ok.append(True)
        else:
            dec.append(np.nan)
            ok.append(True)
    return LyapunovReport(steps, V, np.array(dec), phase, np.array(ok), np.array(dt_ok))


@dataclass
class CostBoundData:
    states: np.ndarray
    distances: np.ndarray
    costs: np.ndarray
    n_infeasible: int

    def lower_envelope(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted distances and the largest non-decreasing minorant of the costs."""
        order = np.argsort(self.distances)
        d, c = self.distances[order], self.costs[order]
        env = np.minimum.accumulate(c[::-1])[::-1]
        return d, env

    def upper_ratio(self, min_distance: float = 1e-6) -> float:
        """Largest ``cost / distance`` over samples away from the target."""
        m = self.distances > min_distance
        return float(np.max(self.costs[m] / self.distances[m])) if np.any(m) else 0.0


def cost_bound_sampling(
    template: OcpSpec, states: Sequence, solver_cfg: Optional[SolverConfig] = None
) -> CostBoundData:
    """Optimal time from each start state against its distance to the target.

    Samples whose problem is invalid or not solved to optimality are dropped
    and counted in ``n_infeasible``.
    """
    if template.dt_min != 0.0:
        raise ValueError("cost-bound sampling needs dt_min = 0")
    kept, dist, cost = [], [], []
    bad = 0
    for s in states:
        s = np.asarray(s, dtype=float)
        try:
            sol = solve_ocp(template.with_start(s), solver_cfg)
        except SpecError:
            bad += 1
            continue
        if sol.solver.status is not Status.OPTIMAL:
            bad += 1
            continue
        kept.append(s)
        dist.append(template.target.distance(s))
        cost.append(sol.t_f_star)
    p = template.model.p
    return CostBoundData(
        np.array(kept).reshape(-1, p), np.array(dist), np.array(cost), bad
    )
