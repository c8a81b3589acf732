"""Continuous-time reconstruction of collocation solutions and their metrics.

A solved decision vector is turned into a control spline (shape depends on
the control parameterization) and a piecewise cubic Hermite state spline.
Both are evaluated right-continuously on ``[0, t_f]``; the last partition is
closed at ``t_f``.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .solver import SolverConfig, SolverResult, restore_feasibility, solve
from .systems import PropagatorConfig, propagate
from .transcription import (
    ControlParam,
    DecisionLayout,
    OcpSpec,
    assemble_nlp,
    initial_guess,
    layout_variables,
)

DEFAULT_SAMPLES = 50
EPS = np.finfo(float).eps
SNAP_ULPS = 16


class OutOfRangeError(ValueError):
    """Evaluation time outside ``[0, t_f]``."""


def _locate(t: np.ndarray, dt: float, N: int):
    """Partition index and local coordinate ``s`` in [0, 1] for times ``t``.

    Times within a few ulps of a breakpoint snap onto it, so grid times
    computed as ``k * dt`` always select the partition that starts there.
    """
    if dt == 0.0:
        return np.zeros(t.shape, dtype=int), np.zeros(t.shape)
    u = t / dt
    r = np.rint(u)
    u = np.where(np.abs(u - r) <= SNAP_ULPS * EPS * np.maximum(1.0, np.abs(u)), r, u)
    k = np.clip(np.floor(u).astype(int), 0, N - 1)
    return k, u - k


@dataclass(frozen=True)
class ControlSpline:
    """Piecewise control interpolant on a uniform grid.

    ``u_k``, ``u_mid`` and ``u_k1`` hold, per partition, the control at its
    start, middle and end as resolved by the parameterization.
    """

    variant: ControlParam
    dt: float
    u_k: np.ndarray
    u_mid: np.ndarray
    u_k1: np.ndarray

    @property
    def N(self) -> int:
        return self.u_k.shape[0]

    @property
    def breakpoints(self) -> np.ndarray:
        step = 0.5 if self.variant is ControlParam.LINEAR else 1.0
        return np.arange(0.0, self.N + 0.5 * step, step) * self.dt

    def coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Linear and quadratic coefficients of the quadratic variant, per partition."""
        dt = self.dt
        if dt == 0.0:
            z = np.zeros_like(self.u_k)
            return z, z
        b1 = -(3.0 * self.u_k - 4.0 * self.u_mid + self.u_k1) / dt
        b2 = 2.0 * (self.u_k - 2.0 * self.u_mid + self.u_k1) / dt**2
        return b1, b2

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k, s = _locate(t, self.dt, self.N)
        s = s[..., None]
        a, m, b = self.u_k[k], self.u_mid[k], self.u_k1[k]
        v = self.variant
        if v is ControlParam.QUADRATIC:
            b1, b2 = self.coefficients()
            tau = s * self.dt
            return a + b1[k] * tau + b2[k] * tau**2
        if v is ControlParam.LINEAR:
            first = a + 2.0 * s * (m - a)
            second = m + (2.0 * s - 1.0) * (b - m)
            return np.where(s < 0.5, first, second)
        if v is ControlParam.MEAN:
            return a + s * (b - a)
        return a.copy()


@dataclass(frozen=True)
class StateSpline:
    """Cubic Hermite state interpolant, one cubic per partition.

    Slopes are the vector field at the partition ends evaluated with the
    partition's own control placeholders, so the derivative may jump at grid
    points when the control does.
    """

    dt: float
    x_grid: np.ndarray  # (N+1, p)
    slope_left: np.ndarray  # (N, p)
    slope_right: np.ndarray  # (N, p)
    x_mid: np.ndarray  # (N, p)

    @property
    def N(self) -> int:
        return self.slope_left.shape[0]

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k, s = _locate(t, self.dt, self.N)
        s = s[..., None]
        s2, s3 = s * s, s * s * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        return (
            h00 * self.x_grid[k] + h01 * self.x_grid[k + 1]
            + self.dt * (h10 * self.slope_left[k] + h11 * self.slope_right[k])
        )

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k, s = _locate(t, self.dt, self.N)
        s = s[..., None]
        s2 = s * s
        dxk = self.x_grid[k + 1] - self.x_grid[k]
        if self.dt == 0.0:
            return self.slope_left[k]
        return (
            (6 * s2 - 6 * s) * dxk / self.dt
            + (3 * s2 - 4 * s + 1) * self.slope_left[k]
            + (3 * s2 - 2 * s) * self.slope_right[k]
        )


@dataclass(frozen=True)
class Solution:
    t_f_star: float
    dt_star: float
    control_spline: ControlSpline
    state_spline: StateSpline
    solver: Optional[SolverResult]
    spec: OcpSpec
    z: np.ndarray
    layout: DecisionLayout

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt_star

    @property
    def status(self) -> str:
        return self.solver.status.value if self.solver is not None else "unsolved"

    @classmethod
    def from_vector(cls, spec: OcpSpec, z, solver_result: Optional[SolverResult] = None) -> "Solution":
        layout = layout_variables(spec)
        z = np.asarray(z, dtype=float).copy()
        dt, X, U = layout.unpack(z)
        dt = float(dt)
        xg = layout.grid_states(X)
        u_k, u_mid, u_k1 = layout.control_placeholders(U)
        f = spec.model.rhs
        slope_left = f(xg[:-1], u_k)
        slope_right = f(xg[1:], u_k1)
        x_mid = layout.mid_states(X)
        if x_mid is None:
            x_mid = 0.5 * (xg[:-1] + xg[1:]) + (dt / 8.0) * (slope_left - slope_right)
        cs = ControlSpline(spec.param, dt, u_k.copy(), u_mid.copy(), u_k1.copy())
        ss = StateSpline(dt, xg.copy(), slope_left, slope_right, x_mid.copy())
        return cls(spec.N * dt, dt, cs, ss, solver_result, spec, z, layout)


# the cold-start fallback doubles the guessed dt at most this many times
FALLBACK_DOUBLINGS = 12


def solve_ocp(spec: OcpSpec, cfg: Optional[SolverConfig] = None, z0=None, time_per_distance: float = 1.0) -> Solution:
    """Transcribe, solve and wrap ``spec``; ``z0`` defaults to :func:`initial_guess`
    at pace ``time_per_distance``.

    Without a user start point a failed solve is retried from repaired
    guesses: the straight-line trajectory is made dynamically consistent at a
    fixed ``dt`` and only then is ``dt`` released. At a straight-line start
    with zero velocities the violation can be stationary in ``dt``, and short
    horizons can funnel the plain solve into a locally infeasible point that
    a longer, overshooting trajectory avoids, so the guessed ``dt`` is doubled
    until a repaired start solves. Doubling ``dt`` rather than the pace
    matters near the target, where distance-scaled guesses are all too short.
    """
    nlp = assemble_nlp(spec)
    if z0 is not None:
        res = solve(nlp, z0, cfg)
        return Solution.from_vector(spec, res.z_opt, res)
    cfg = cfg or SolverConfig()
    res = solve(nlp, initial_guess(spec, time_per_distance), cfg)
    if not res.success:
        frozen = np.zeros(nlp.n_z, dtype=bool)
        frozen[0] = True
        guess = initial_guess(spec, time_per_distance)
        for k in range(FALLBACK_DOUBLINGS):
            if k and guess[0] >= nlp.ub[0]:
                break
            guess[0] = min(2.0 * guess[0], nlp.ub[0]) if k else guess[0]
            z, viol = restore_feasibility(nlp, guess, frozen, fd_step=cfg.fd_step)
            if viol > cfg.constraint_tol:
                continue
            retry = solve(nlp, z, cfg)
            if retry.success:
                res = retry
                break
    return Solution.from_vector(spec, res.z_opt, res)


def _check_range(sol: Solution, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    tol = 1e-12 * max(1.0, sol.t_f_star)
    if np.any(t < -tol) or np.any(t > sol.t_f_star + tol) or not np.all(np.isfinite(t)):
        raise OutOfRangeError(f"time outside [0, {sol.t_f_star:g}]")
    return np.clip(t, 0.0, sol.t_f_star)


def eval_control(sol: Solution, t) -> np.ndarray:
    """Control at time(s) ``t``; shape ``(q,)`` or ``t.shape + (q,)``."""
    return sol.control_spline(_check_range(sol, t))


def eval_state(sol: Solution, t) -> np.ndarray:
    return sol.state_spline(_check_range(sol, t))


def sample_times(sol: Solution, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """``n_samples`` points per partition plus the final time."""
    if sol.t_f_star == 0.0:
        return np.zeros(1)
    return np.arange(sol.N * n_samples + 1) * (sol.dt_star / n_samples)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class DynamicsError:
    t: np.ndarray
    deviation: np.ndarray  # |x_spline(t) - x_sim(t)|_2
    integral: np.ndarray  # running integral of ``deviation``
    terminal_mismatch: float

    @property
    def final(self) -> float:
        return float(self.integral[-1])


def dynamics_error(
    sol: Solution, cfg: Optional[PropagatorConfig] = None, n_samples: int = DEFAULT_SAMPLES
) -> DynamicsError:
    """Mismatch between the state spline and the plant driven by the control spline.

    The plant is re-integrated from the spline's initial state under
    :func:`eval_control`. Returns the pointwise Euclidean deviation, its
    running time integral and the terminal mismatch.
    """
    t = sample_times(sol, n_samples)
    if sol.t_f_star == 0.0:
        z = np.zeros(1)
        return DynamicsError(t, z, z.copy(), 0.0)
    traj = propagate(
        sol.spec.model, sol.state_spline.x_grid[0], sol.control_spline, (0.0, sol.t_f_star), cfg,
        t_eval=t, breakpoints=sol.control_spline.breakpoints,
    )
    dev = np.linalg.norm(sol.state_spline(t) - traj.x, axis=1)
    integral = cumulative_trapezoid(dev, t, initial=0.0)
    return DynamicsError(t, dev, integral, float(dev[-1]))


def _constraint_samples(sol: Solution, t: np.ndarray):
    """Pointwise positive-part violations, ``(names, values[len(t), n_con])``."""
    spec = sol.spec
    x = sol.state_spline(t)
    u = sol.control_spline(t)
    names, cols = [], []
    lo_u, hi_u = (np.asarray(b, dtype=float) for b in spec.u_bounds)
    for j in range(spec.model.q):
        names += [f"u{j + 1}_lower", f"u{j + 1}_upper"]
        cols += [lo_u[j] - u[:, j], u[:, j] - hi_u[j]]
    if spec.x_bounds is not None:
        lo_x, hi_x = (np.asarray(b, dtype=float) for b in spec.x_bounds)
        for j in range(spec.model.p):
            if np.isfinite(lo_x[j]):
                names.append(f"x{j + 1}_lower")
                cols.append(lo_x[j] - x[:, j])
            if np.isfinite(hi_x[j]):
                names.append(f"x{j + 1}_upper")
                cols.append(x[:, j] - hi_x[j])
    if spec.path_ineq is not None and spec.n_path:
        g = np.atleast_2d(np.stack([spec.eval_path(row) for row in x]))
        labels = list(spec.path_names) or [f"g{i + 1}" for i in range(spec.n_path)]
        names += labels
        cols += [g[:, i] for i in range(spec.n_path)]
    vals = np.maximum(np.stack(cols, axis=1), 0.0) if cols else np.zeros((t.size, 0))
    return names, vals


@dataclass
class ViolationReport:
    names: list
    max_violation: np.ndarray
    argmax_time: np.ndarray

    def __getitem__(self, name: str) -> float:
        return float(self.max_violation[self.names.index(name)])

    def time_of(self, name: str) -> float:
        return float(self.argmax_time[self.names.index(name)])

    @property
    def worst(self) -> float:
        return float(self.max_violation.max(initial=0.0))

    def as_dict(self) -> dict:
        return {
            n: {"max_violation": float(v), "time": float(tm)}
            for n, v, tm in zip(self.names, self.max_violation, self.argmax_time)
        }


def violation_profile(sol: Solution, n_samples: int = DEFAULT_SAMPLES) -> ViolationReport:
    """Largest violation of every box and path constraint on a dense time grid."""
    if n_samples < 10:
        raise ValueError("need at least 10 samples per partition")
    t = sample_times(sol, n_samples)
    names, vals = _constraint_samples(sol, t)
    idx = np.argmax(vals, axis=0) if vals.shape[1] else np.zeros(0, dtype=int)
    return ViolationReport(names, vals.max(axis=0, initial=0.0), t[idx])


def total_variation(sol: Solution, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Sum of absolute control increments over dense samples, per channel."""
    u = sol.control_spline(sample_times(sol, n_samples))
    return np.abs(np.diff(u, axis=0)).sum(axis=0)


def export_csv(sol: Solution, target, n_samples: int = DEFAULT_SAMPLES) -> None:
    """Write sampled ``t, x1..xp, u1..uq`` and one violation column per constraint.

    ``target`` is a path or a writable text stream.
    """
    t = sample_times(sol, n_samples)
    x = sol.state_spline(t)
    u = sol.control_spline(t)
    names, vals = _constraint_samples(sol, t)
    header = ["t"] + [f"x{i + 1}" for i in range(x.shape[1])] + [f"u{i + 1}" for i in range(u.shape[1])]
    header += [f"viol_{n}" for n in names]
    data = np.column_stack([t, x, u, vals])
    if isinstance(target, (str, os.PathLike)):
        with open(target, "w", newline="", encoding="utf-8") as fh:
            _write_rows(fh, header, data)
    else:
        _write_rows(target, header, data)


def _write_rows(fh: io.TextIOBase, header, data) -> None:
    w = csv.writer(fh)
    w.writerow(header)
    for row in data:
        w.writerow([repr(float(v)) for v in row])
