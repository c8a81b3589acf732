"""Dynamic-system models and a reference ODE propagator.

Models are continuous-time and time-invariant, ``xdot = f(x, u)``. The vector
field of every model shipped here broadcasts over leading axes, so the
transcription layer can evaluate all collocation points in a single call:
``f(x[..., p], u[..., q]) -> xdot[..., p]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import RK45

VectorField = Callable[[np.ndarray, np.ndarray], np.ndarray]

ROCKET_MIN_MASS = 1e-12
# propagate samples a piecewise control this many ulps left of each breakpoint
LEFT_LIMIT_ULPS = 256


class DomainError(ValueError):
    """Raised when a vector field is evaluated outside its admissible domain."""


class PropagationError(RuntimeError):
    """Raised when the propagator cannot continue.

    Attributes
    ----------
    t_last : float
        Last time instant at which the state was finite and valid.
    """

    def __init__(self, message: str, t_last: float):
        super().__init__(f"{message} (last valid t={t_last:.6g})")
        self.t_last = t_last


@dataclass(frozen=True)
class SystemModel:
    """Vector field ``f`` with its dimensions and optional analytic partials.

    ``jac_x(x, u)`` returns a ``(p, p)`` matrix and ``jac_u(x, u)`` a ``(p, q)``
    matrix for a single (unbatched) point. If ``vectorized`` is False the field
    is wrapped so batched calls loop over points.
    """

    p: int
    q: int
    f: VectorField
    jac_x: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    jac_u: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "system"
    vectorized: bool = True
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.p) < 1 or int(self.q) < 1:
            raise ValueError(f"dimensions must be positive, got p={self.p}, q={self.q}")

    def rhs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Batched evaluation without dimension checks (hot path)."""
        if self.vectorized:
            return self.f(x, u)
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.ndim == 1:
            return np.asarray(self.f(x, u), dtype=float)
        lead = x.shape[:-1]
        xs = x.reshape(-1, self.p)
        us = np.broadcast_to(u, lead + (self.q,)).reshape(-1, self.q)
        out = np.array([self.f(a, b) for a, b in zip(xs, us)], dtype=float)
        return out.reshape(lead + (self.p,))


def _as_vector(v, n: int, what: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (n,):
        raise ValueError(f"{what} must have shape ({n},), got {arr.shape}")
    return arr


def eval_dynamics(model: SystemModel, x, u) -> np.ndarray:
    """Return ``f(x, u)`` for a single state/control pair.

    Raises
    ------
    ValueError
        If ``x`` or ``u`` does not match the model dimensions.
    """
    x = _as_vector(x, model.p, "state")
    u = _as_vector(u, model.q, "control")
    out = np.asarray(model.rhs(x, u), dtype=float)
    if out.shape != (model.p,):
        raise ValueError(f"{model.name}: f returned shape {out.shape}, expected ({model.p},)")
    return out


# ---------------------------------------------------------------------------
# benchmark models


def _vdp_f(x, u):
    x1 = x[..., 0]
    x2 = x[..., 1]
    return np.stack([x2, (1.0 - x1 * x1) * x2 - x1 + u[..., 0]], axis=-1)


def _vdp_jac_x(x, u):
    x1, x2 = x
    return np.array([[0.0, 1.0], [-2.0 * x1 * x2 - 1.0, 1.0 - x1 * x1]])


def _vdp_jac_u(x, u):
    return np.array([[0.0], [1.0]])


def make_vdp() -> SystemModel:
    """Van der Pol oscillator with additive control on the velocity equation."""
    return SystemModel(p=2, q=1, f=_vdp_f, jac_x=_vdp_jac_x, jac_u=_vdp_jac_u, name="vdp")


def make_vdp_mismatch(damping: float = 1.0) -> SystemModel:
    """Van der Pol variant with a scaled damping term, for plant-mismatch runs."""

    def f(x, u):
        x1 = x[..., 0]
        x2 = x[..., 1]
        return np.stack([x2, damping * (1.0 - x1 * x1) * x2 - x1 + u[..., 0]], axis=-1)

    def jac_x(x, u):
        x1, x2 = x
        return np.array(
            [[0.0, 1.0], [-2.0 * damping * x1 * x2 - 1.0, damping * (1.0 - x1 * x1)]]
        )

    return SystemModel(
        p=2, q=1, f=f, jac_x=jac_x, jac_u=_vdp_jac_u, name="vdp", params={"damping": damping}
    )


def _rocket_f(x, u):
    v = x[..., 1]
    m = x[..., 2]
    if np.any(m <= ROCKET_MIN_MASS):
        raise DomainError("rocket mass must be positive")
    uu = u[..., 0]
    return np.stack([v, (uu - 0.02 * v * v) / m, -0.01 * uu * uu], axis=-1)


def _rocket_jac_x(x, u):
    _, v, m = x
    if m <= ROCKET_MIN_MASS:
        raise DomainError("rocket mass must be positive")
    uu = u[0]
    return np.array(
        [
            [0.0, 1.0, 0.0],
            [0.0, -0.04 * v / m, -(uu - 0.02 * v * v) / (m * m)],
            [0.0, 0.0, 0.0],
        ]
    )


def _rocket_jac_u(x, u):
    m = x[2]
    if m <= ROCKET_MIN_MASS:
        raise DomainError("rocket mass must be positive")
    return np.array([[0.0], [1.0 / m], [-0.02 * u[0]]])


def make_rocket() -> SystemModel:
    """Free-space rocket: position, velocity, mass; quadratic drag and fuel burn."""
    return SystemModel(p=3, q=1, f=_rocket_f, jac_x=_rocket_jac_x, jac_u=_rocket_jac_u, name="rocket")


def _di_f(x, u):
    return np.stack([x[..., 1], u[..., 0]], axis=-1)


def make_double_integrator() -> SystemModel:
    return SystemModel(
        p=2,
        q=1,
        f=_di_f,
        jac_x=lambda x, u: np.array([[0.0, 1.0], [0.0, 0.0]]),
        jac_u=lambda x, u: np.array([[0.0], [1.0]]),
        name="double_integrator",
    )


def make_linear(A, B, name: str = "linear") -> SystemModel:
    """Linear time-invariant system ``xdot = A x + B u``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    p = A.shape[0]
    if A.shape != (p, p) or B.shape[0] != p:
        raise ValueError(f"incompatible shapes A{A.shape}, B{B.shape}")
    At, Bt = A.T.copy(), B.T.copy()
    return SystemModel(
        p=p,
        q=B.shape[1],
        f=lambda x, u: x @ At + u @ Bt,
        jac_x=lambda x, u: A.copy(),
        jac_u=lambda x, u: B.copy(),
        name=name,
        params={"A": A.tolist(), "B": B.tolist()},
    )


def check_partials(model: SystemModel, x, u, rel_tol: float = 1e-5, h: float = 1e-6) -> bool:
    """Compare analytic partials with central finite differences at ``(x, u)``."""
    x = _as_vector(x, model.p, "state")
    u = _as_vector(u, model.q, "control")
    pairs = []
    if model.jac_x is not None:
        pairs.append((model.jac_x(x, u), x, lambda xx: eval_dynamics(model, xx, u)))
    if model.jac_u is not None:
        pairs.append((model.jac_u(x, u), u, lambda uu: eval_dynamics(model, x, uu)))
    for analytic, at, fn in pairs:
        num = np.empty_like(analytic)
        for j in range(at.size):
            e = np.zeros_like(at)
            e[j] = h * max(1.0, abs(at[j]))
            num[:, j] = (fn(at + e) - fn(at - e)) / (2.0 * e[j])
        scale = np.maximum(1.0, np.abs(num))
        if np.any(np.abs(analytic - num) > rel_tol * scale):
            return False
    return True


# ---------------------------------------------------------------------------
# propagation


@dataclass(frozen=True)
class PropagatorConfig:
    """Integrator settings for :func:`propagate`.

    ``step`` is only used by ``rk4-fixed``; ``max_steps`` caps the total number
    of accepted steps for either method.
    """

    method: str = "rk45-adaptive"
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_steps: int = 200_000
    step: float = 1e-2

    def __post_init__(self):
        if self.method not in ("rk4-fixed", "rk45-adaptive"):
            raise ValueError(f"unknown propagation method {self.method!r}")
        if not (self.abs_tol > 0 and self.rel_tol > 0 and self.step > 0):
            raise ValueError("tolerances and step must be strictly positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class SampledTrajectory:
    t: np.ndarray
    x: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.x[-1]


def _segment_bounds(T: float, breakpoints: Optional[Sequence[float]]) -> np.ndarray:
    pts = [0.0, T]
    if breakpoints is not None:
        pts.extend(float(b) for b in breakpoints if 0.0 < b < T)
    return np.unique(np.asarray(pts, dtype=float))


def _rk4_step(fun, t, x, h):
    k1 = fun(t, x)
    k2 = fun(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = fun(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = fun(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def propagate(
    model: SystemModel,
    x0,
    u_of_t: Callable[[float], np.ndarray],
    t_span,
    cfg: Optional[PropagatorConfig] = None,
    *,
    t_eval=None,
    breakpoints: Optional[Sequence[float]] = None,
) -> SampledTrajectory:
    """Integrate ``xdot = f(x, u(t))`` from ``x0`` over ``[0, T]``.

    Parameters
    ----------
    model : SystemModel
    x0 : array_like, shape (p,)
    u_of_t : callable
        Control signal ``t -> u``. Evaluated right-continuously: inside each
        segment between consecutive ``breakpoints`` the signal is sampled at
        least ``LEFT_LIMIT_ULPS`` ulps left of the segment end, so a piecewise
        control never leaks the next segment's value into the current one.
    t_span : float or (0, T)
    cfg : PropagatorConfig, optional
    t_eval : array_like, optional
        Output times in ``[0, T]``. Defaults to the integrator's own steps.
    breakpoints : sequence of float, optional
        Known discontinuities of ``u_of_t``; integration restarts at each.

    Returns
    -------
    SampledTrajectory

    Raises
    ------
    PropagationError
        On non-finite derivatives, domain errors, or when ``cfg.max_steps`` is
        exceeded.
    """
    cfg = cfg or PropagatorConfig()
    if np.ndim(t_span) == 0:
        t0, T = 0.0, float(t_span)
    else:
        t0, T = (float(v) for v in t_span)
    if t0 != 0.0:
        raise ValueError("t_span must start at 0 (time-invariant system)")
    if T < 0:
        raise ValueError("final time must be non-negative")
    x0 = _as_vector(x0, model.p, "initial state")

    order = None
    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        if t_eval.size and (t_eval.min() < 0 or t_eval.max() > T * (1 + 1e-12) + 1e-15):
            raise ValueError("t_eval outside [0, T]")
        t_eval = np.clip(t_eval, 0.0, T)
        order = np.argsort(t_eval, kind="stable")

    if T == 0.0:
        ts = np.zeros(1) if t_eval is None else t_eval
        return SampledTrajectory(ts, np.tile(x0, (ts.size, 1)))

    bounds = _segment_bounds(T, breakpoints)
    state = {"t_ok": 0.0, "steps": 0}

    def make_rhs(a: float, b: float):
        # far enough left of b that a spline lookup cannot snap onto b
        b_left = max(a, b - LEFT_LIMIT_ULPS * np.finfo(float).eps * max(1.0, abs(b)))

        def rhs(t, x):
            tc = min(max(t, a), b_left)
            u = np.atleast_1d(np.asarray(u_of_t(tc), dtype=float))
            try:
                dx = model.rhs(x, u)
            except DomainError as exc:
                raise PropagationError(f"{model.name}: {exc}", state["t_ok"]) from exc
            dx = np.asarray(dx, dtype=float)
            if not np.all(np.isfinite(dx)):
                raise PropagationError(f"{model.name}: non-finite derivative", state["t_ok"])
            return dx

        return rhs

    out_t: list[np.ndarray] = []
    out_x: list[np.ndarray] = []
    x = x0.copy()
    if t_eval is None:
        out_t.append(np.zeros(1))
        out_x.append(x0[None, :])

    for seg, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        rhs = make_rhs(a, b)
        last = seg == len(bounds) - 2
        if t_eval is not None:
            ts_sorted = t_eval[order]
            mask = (ts_sorted >= a) & ((ts_sorted < b) | (last & (ts_sorted <= b)))
            want = ts_sorted[mask]
        else:
            want = None

        if cfg.method == "rk4-fixed":
            x, ts, xs = _rk4_segment(rhs, a, b, x, cfg, state, want)
        else:
            x, ts, xs = _rk45_segment(rhs, a, b, x, cfg, state, want)
        out_t.append(ts)
        out_x.append(xs)

    t_all = np.concatenate(out_t)
    x_all = np.concatenate(out_x, axis=0)
    if t_eval is not None:
        x_sorted = x_all
        x_all = np.empty_like(x_sorted)
        x_all[order] = x_sorted
        t_all = t_eval
    return SampledTrajectory(t_all, x_all)


def _rk4_segment(rhs, a, b, x, cfg, state, want):
    stops = np.array([a, b]) if want is None else np.unique(np.concatenate([[a, b], want]))
    ts, xs = [], []
    if want is not None and want.size and want[0] == a:
        ts.append(a)
        xs.append(x.copy())
    for s0, s1 in zip(stops[:-1], stops[1:]):
        n = max(1, math.ceil((s1 - s0) / cfg.step - 1e-9))
        h = (s1 - s0) / n
        for i in range(n):
            state["steps"] += 1
            if state["steps"] > cfg.max_steps:
                raise PropagationError("step limit exceeded", state["t_ok"])
            t = s0 + i * h
            x = _rk4_step(rhs, t, x, h)
            if not np.all(np.isfinite(x)):
                raise PropagationError("non-finite state", state["t_ok"])
            state["t_ok"] = t + h
            if want is None:
                ts.append(t + h)
                xs.append(x.copy())
        if want is not None and s1 in want:
            ts.append(s1)
            xs.append(x.copy())
    xs_arr = np.array(xs).reshape(len(ts), -1)
    return x, np.asarray(ts, dtype=float), xs_arr


def _rk45_segment(rhs, a, b, x, cfg, state, want):
    solver = RK45(rhs, a, x, b, rtol=cfg.rel_tol, atol=cfg.abs_tol)
    ts, xs = [], []
    pending = list(want) if want is not None else None
    while solver.status == "running":
        t_prev = solver.t
        msg = solver.step()
        state["steps"] += 1
        if solver.status == "failed":
            raise PropagationError(f"integrator failed: {msg}", state["t_ok"])
        if state["steps"] > cfg.max_steps:
            raise PropagationError("step limit exceeded", state["t_ok"])
        if not np.all(np.isfinite(solver.y)):
            raise PropagationError("non-finite state", state["t_ok"])
        state["t_ok"] = solver.t
        if pending is None:
            ts.append(solver.t)
            xs.append(solver.y.copy())
        else:
            dense = None
            while pending and pending[0] <= solver.t:
                tq = pending.pop(0)
                if tq == solver.t:
                    val = solver.y.copy()
                elif tq <= t_prev:
                    val = x.copy() if tq == a else None
                    if val is None:
                        dense = dense or solver.dense_output()
                        val = dense(tq)
                else:
                    dense = dense or solver.dense_output()
                    val = dense(tq)
                ts.append(tq)
                xs.append(val)
    if pending:
        for tq in pending:
            ts.append(tq)
            xs.append(solver.y.copy())
    xs_arr = np.array(xs).reshape(len(ts), -1)
    return solver.y.copy(), np.asarray(ts, dtype=float), xs_arr
