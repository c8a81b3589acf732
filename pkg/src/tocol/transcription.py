"""Hermite-Simpson transcription of the minimum-time problem on a variable grid.

The grid has ``N`` partitions of a single shared length ``dt``, so the final
time is ``N * dt`` and the NLP cost is linear in the decision vector. The
decision vector is laid out as ``[dt | states | controls]``; states and
controls are stored point-major, i.e. all components of one grid point are
contiguous, which keeps each collocation block confined to a narrow band of
columns.

Grid indices are half-integers: ``k = 0, 0.5, 1, ..., N``. Which of them carry
state or control variables depends on the :class:`CollocationForm` and
:class:`ControlParam`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .systems import SystemModel

DT_GUESS_FLOOR = 1e-3


class SpecError(ValueError):
    """Invalid optimal control problem data."""


class ControlParam(str, enum.Enum):
    QUADRATIC = "quadratic"
    LINEAR = "linear"
    MEAN = "mean"
    CONSTANT = "constant"

    @property
    def has_midpoints(self) -> bool:
        return self in (ControlParam.QUADRATIC, ControlParam.LINEAR)


class CollocationForm(str, enum.Enum):
    COMPRESSED = "compressed"
    UNCOMPRESSED = "uncompressed"


@dataclass(frozen=True)
class TargetSpec:
    """Axis-aligned terminal set: each state component is fixed or free.

    ``values[i]`` is the required terminal value of component ``i``, or
    ``None`` when the component is free.
    """

    values: tuple

    def __post_init__(self):
        vals = tuple(None if v is None else float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not any(v is not None for v in vals):
            raise SpecError("target must fix at least one state component")

    @classmethod
    def point(cls, x) -> "TargetSpec":
        return cls(tuple(float(v) for v in np.atleast_1d(x)))

    @property
    def fixed_mask(self) -> np.ndarray:
        return np.array([v is not None for v in self.values])

    @property
    def fixed_indices(self) -> np.ndarray:
        return np.flatnonzero(self.fixed_mask)

    @property
    def fixed_values(self) -> np.ndarray:
        return np.array([v for v in self.values if v is not None], dtype=float)

    def distance(self, x) -> float:
        """Euclidean distance of ``x`` to the target, over fixed components."""
        x = np.asarray(x, dtype=float)
        return float(np.linalg.norm(x[self.fixed_indices] - self.fixed_values))


PathConstraint = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OcpSpec:
    """Data of the transcribed minimum-time problem.

    Parameters
    ----------
    model : SystemModel
    x_start : array_like, shape (p,)
    target : TargetSpec
    u_bounds : (lower, upper)
        Finite control box; each side is a scalar or a length-``q`` sequence.
    x_bounds : (lower, upper), optional
        State box, entries may be infinite. Defaults to unbounded.
    path_ineq : callable, optional
        ``g(x[..., p]) -> [..., n_path]`` with the convention ``g <= 0``.
    n_path : int
        Number of outputs of ``path_ineq``.
    N : int
        Number of grid partitions.
    dt_min, dt_max : float
        Bounds on the shared partition length.
    """

    model: SystemModel
    x_start: np.ndarray
    target: TargetSpec
    u_bounds: tuple
    x_bounds: Optional[tuple] = None
    path_ineq: Optional[PathConstraint] = None
    n_path: int = 0
    N: int = 10
    dt_min: float = 0.0
    dt_max: float = np.inf
    param: ControlParam = ControlParam.CONSTANT
    form: CollocationForm = CollocationForm.COMPRESSED
    path_names: tuple = field(default=(), compare=False)

    def __post_init__(self):
        p, q = self.model.p, self.model.q
        setter = object.__setattr__
        setter(self, "param", ControlParam(self.param))
        setter(self, "form", CollocationForm(self.form))
        xs = np.atleast_1d(np.asarray(self.x_start, dtype=float)).copy()
        if xs.shape != (p,):
            raise SpecError(f"x_start must have {p} components, got {xs.shape}")
        if not np.all(np.isfinite(xs)):
            raise SpecError("x_start must be finite")
        xs.setflags(write=False)
        setter(self, "x_start", xs)
        if len(self.target.values) != p:
            raise SpecError(f"target must have {p} components")

        ulo, uhi = (np.broadcast_to(np.asarray(b, dtype=float), (q,)).copy() for b in self.u_bounds)
        if not (np.all(np.isfinite(ulo)) and np.all(np.isfinite(uhi))):
            raise SpecError("control bounds must be finite")
        if np.any(ulo >= uhi):
            raise SpecError("control lower bound must be strictly below upper bound")
        setter(self, "u_bounds", (ulo, uhi))

        xb = self.x_bounds if self.x_bounds is not None else (-np.inf, np.inf)
        xlo, xhi = (np.broadcast_to(np.asarray(b, dtype=float), (p,)).copy() for b in xb)
        if np.any(xlo > xhi):
            raise SpecError("state lower bound exceeds upper bound")
        setter(self, "x_bounds", (xlo, xhi))

        if int(self.N) != self.N or self.N < 1:
            raise SpecError(f"N must be an integer >= 1, got {self.N}")
        setter(self, "N", int(self.N))
        if not (0.0 <= self.dt_min <= self.dt_max):
            raise SpecError(f"need 0 <= dt_min <= dt_max, got {self.dt_min}, {self.dt_max}")
        if self.path_ineq is not None and self.n_path < 1:
            raise SpecError("n_path must be given with path_ineq")

        fi = self.target.fixed_indices
        fv = self.target.fixed_values
        if np.any(fv < xlo[fi]) or np.any(fv > xhi[fi]):
            raise SpecError("fixed target components must lie within the state bounds")
        if np.any(xs < xlo) or np.any(xs > xhi):
            raise SpecError("x_start must satisfy the state bounds")
        if self.path_ineq is not None and np.any(self.eval_path(xs) > 0):
            raise SpecError("x_start violates the path constraints")

    def eval_path(self, x: np.ndarray) -> np.ndarray:
        if self.path_ineq is None:
            return np.zeros(np.shape(x)[:-1] + (0,))
        return np.asarray(self.path_ineq(x), dtype=float)

    def with_start(self, x_start, **changes) -> "OcpSpec":
        from dataclasses import replace

        return replace(self, x_start=np.asarray(x_start, dtype=float), **changes)


# ---------------------------------------------------------------------------
# decision layout


@dataclass(frozen=True)
class DecisionLayout:
    """Offsets of ``dt``, states and controls within the flat decision vector."""

    N: int
    p: int
    q: int
    form: CollocationForm
    param: ControlParam

    @property
    def x_keys(self) -> np.ndarray:
        """Grid indices (half-integers) carrying state variables, in storage order."""
        if self.form is CollocationForm.UNCOMPRESSED:
            return np.arange(2 * self.N + 1) / 2.0
        return np.arange(self.N + 1, dtype=float)

    @property
    def u_keys(self) -> np.ndarray:
        if self.param.has_midpoints:
            return np.arange(2 * self.N + 1) / 2.0
        if self.param is ControlParam.MEAN:
            return np.arange(self.N + 1, dtype=float)
        return np.arange(self.N, dtype=float)

    @property
    def n_xpts(self) -> int:
        return self.x_keys.size

    @property
    def n_upts(self) -> int:
        return self.u_keys.size

    @property
    def x_start(self) -> int:
        return 1

    @property
    def u_start(self) -> int:
        return 1 + self.p * self.n_xpts

    @property
    def n_z(self) -> int:
        return 1 + self.p * self.n_xpts + self.q * self.n_upts

    def _stride(self, keys_are_half: bool, k: float, n: int) -> int:
        j = 2 * k if keys_are_half else k
        if j != int(j) or not 0 <= j < n:
            raise KeyError(k)
        return int(j)

    def x_offset(self, k: float) -> int:
        j = self._stride(self.form is CollocationForm.UNCOMPRESSED, k, self.n_xpts)
        return self.x_start + self.p * j

    def u_offset(self, k: float) -> int:
        j = self._stride(self.param.has_midpoints, k, self.n_upts)
        return self.u_start + self.q * j

    def unpack(self, z: np.ndarray):
        """Split ``z`` into ``(dt, X[n_xpts, p], U[n_upts, q])`` views."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_z,):
            raise ValueError(f"decision vector must have length {self.n_z}, got {z.shape}")
        X = z[self.x_start : self.u_start].reshape(self.n_xpts, self.p)
        U = z[self.u_start :].reshape(self.n_upts, self.q)
        return z[0], X, U

    def pack(self, dt: float, X, U) -> np.ndarray:
        z = np.empty(self.n_z)
        z[0] = dt
        z[self.x_start : self.u_start] = np.asarray(X, dtype=float).reshape(-1)
        z[self.u_start :] = np.asarray(U, dtype=float).reshape(-1)
        return z

    def grid_states(self, X: np.ndarray) -> np.ndarray:
        return X[::2] if self.form is CollocationForm.UNCOMPRESSED else X

    def mid_states(self, X: np.ndarray) -> Optional[np.ndarray]:
        return X[1::2] if self.form is CollocationForm.UNCOMPRESSED else None

    def control_placeholders(self, U: np.ndarray):
        """Per-partition controls ``(u_k, u_hat_mid, u_hat_k1)``, each ``(N, q)``."""
        if self.param.has_midpoints:
            return U[0:-1:2], U[1::2], U[2::2]
        if self.param is ControlParam.MEAN:
            return U[:-1], 0.5 * (U[:-1] + U[1:]), U[1:]
        return U, U, U

    def control_columns(self, k: int, which: str = "all") -> list[int]:
        """Decision columns of the controls referenced by partition ``k``.

        ``which='ends'`` restricts to the controls entering ``f`` at the grid
        points ``k`` and ``k+1``.
        """
        q = self.q
        if self.param.has_midpoints:
            idx = [2 * k, 2 * k + 2] if which == "ends" else [2 * k, 2 * k + 1, 2 * k + 2]
        elif self.param is ControlParam.MEAN:
            idx = [k, k + 1]
        else:
            idx = [k]
        return [self.u_start + q * j + c for j in idx for c in range(q)]

    def state_columns(self, j: int) -> list[int]:
        """Decision columns of stored state point ``j`` (storage index)."""
        base = self.x_start + self.p * j
        return list(range(base, base + self.p))


def layout_variables(spec: OcpSpec) -> DecisionLayout:
    return DecisionLayout(N=spec.N, p=spec.model.p, q=spec.model.q, form=spec.form, param=spec.param)


# ---------------------------------------------------------------------------
# Hermite-Simpson building blocks


def simpson_quadrature(model: SystemModel, x_k, u_k, x_mid, u_mid, x_k1, u_k1, dt) -> np.ndarray:
    """Simpson estimate of the state increment over one partition.

    ``(dt/6) * (f(x_k, u_k) + 4 f(x_mid, u_mid) + f(x_k1, u_k1))``. Inputs
    may carry leading batch axes.
    """
    if np.any(np.asarray(dt) < 0):
        raise ValueError("dt must be non-negative")
    f = model.rhs
    x_k, u_k, x_mid, u_mid, x_k1, u_k1 = (
        np.asarray(a, dtype=float) for a in (x_k, u_k, x_mid, u_mid, x_k1, u_k1)
    )
    return (dt / 6.0) * (f(x_k, u_k) + 4.0 * f(x_mid, u_mid) + f(x_k1, u_k1))


def hermite_midpoint(model: SystemModel, x_k, u_k, x_k1, u_k1, dt) -> np.ndarray:
    """Midpoint state of the cubic Hermite interpolant of one partition."""
    if np.any(np.asarray(dt) < 0):
        raise ValueError("dt must be non-negative")
    x_k, u_k, x_k1, u_k1 = (np.asarray(a, dtype=float) for a in (x_k, u_k, x_k1, u_k1))
    return 0.5 * (x_k + x_k1) + (dt / 8.0) * (model.rhs(x_k, u_k) - model.rhs(x_k1, u_k1))


@dataclass
class _PartitionEval:
    dt: float
    xg: np.ndarray  # (N+1, p)
    x_mid: np.ndarray  # (N, p) computed (compressed) or variable (uncompressed)
    f_left: np.ndarray
    f_right: np.ndarray
    x_mid_interp: np.ndarray  # Hermite midpoint from the endpoints
    u_k: np.ndarray
    u_mid: np.ndarray
    u_k1: np.ndarray


def _evaluate_partitions(model: SystemModel, layout: DecisionLayout, z: np.ndarray) -> _PartitionEval:
    dt, X, U = layout.unpack(z)
    xg = layout.grid_states(X)
    u_k, u_mid, u_k1 = layout.control_placeholders(U)
    f_left = model.rhs(xg[:-1], u_k)
    if layout.param is ControlParam.CONSTANT:
        f_right = model.rhs(xg[1:], u_k1)
    else:
        # right end of partition k shares (x_{k+1}, u_{k+1}) with the left end of k+1
        f_last = model.rhs(xg[-1:], u_k1[-1:])
        f_right = np.concatenate([f_left[1:], f_last], axis=0)
    x_interp = 0.5 * (xg[:-1] + xg[1:]) + (dt / 8.0) * (f_left - f_right)
    x_mid = layout.mid_states(X)
    if x_mid is None:
        x_mid = x_interp
    return _PartitionEval(dt, xg, x_mid, f_left, f_right, x_interp, u_k, u_mid, u_k1)


def collocation_defects(spec: OcpSpec, z, layout: Optional[DecisionLayout] = None) -> np.ndarray:
    """Collocation residuals, one contiguous block per partition.

    Compressed form yields ``p`` rows per partition (Simpson defect with the
    Hermite midpoint substituted); uncompressed yields ``2p`` rows per
    partition: the Simpson defect using the midpoint variable, followed by the
    midpoint-consistency residual.
    """
    layout = layout or layout_variables(spec)
    z = np.asarray(z, dtype=float)
    if z.shape != (layout.n_z,):
        raise ValueError(f"decision vector must have length {layout.n_z}, got {z.shape}")
    ev = _evaluate_partitions(spec.model, layout, z)
    f_mid = spec.model.rhs(ev.x_mid, ev.u_mid)
    increment = (ev.dt / 6.0) * (ev.f_left + 4.0 * f_mid + ev.f_right)
    simpson = ev.xg[1:] - ev.xg[:-1] - increment
    if layout.form is CollocationForm.COMPRESSED:
        return simpson.reshape(-1)
    consistency = ev.x_mid - ev.x_mid_interp
    return np.concatenate([simpson, consistency], axis=1).reshape(-1)


# ---------------------------------------------------------------------------
# NLP assembly


@dataclass
class NlpProblem:
    """Smooth NLP ``min cost(z)`` s.t. ``eq_con(z) = 0``, ``ineq_con(z) <= 0``, ``lb <= z <= ub``.

    ``jac_sparsity`` maps ``"eq"`` and ``"ineq"`` to ``(rows, cols)`` integer
    arrays listing the structurally nonzero Jacobian entries of each block.
    A missing entry means the pattern is unknown and treated as dense.
    """

    n_z: int
    cost: Callable[[np.ndarray], float]
    eq_con: Callable[[np.ndarray], np.ndarray]
    ineq_con: Callable[[np.ndarray], np.ndarray]
    m_e: int
    m_i: int
    lb: np.ndarray
    ub: np.ndarray
    cost_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jac_sparsity: dict = field(default_factory=dict)
    layout: Optional[DecisionLayout] = None
    spec: Optional[OcpSpec] = None
    ineq_names: list = field(default_factory=list)

    @classmethod
    def from_functions(cls, n_z, cost, eq_con=None, ineq_con=None, lb=None, ub=None, **kw):
        """Build a problem from plain callables; constraint counts are probed at ``0``."""
        probe = np.zeros(n_z)
        if lb is not None:
            probe = np.clip(probe, lb, ub if ub is not None else np.inf)
        eq_con = eq_con or (lambda z: np.zeros(0))
        ineq_con = ineq_con or (lambda z: np.zeros(0))
        m_e = np.atleast_1d(eq_con(probe)).size
        m_i = np.atleast_1d(ineq_con(probe)).size
        lb = np.full(n_z, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (n_z,)).copy()
        ub = np.full(n_z, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (n_z,)).copy()
        return cls(
            n_z=n_z,
            cost=cost,
            eq_con=lambda z: np.atleast_1d(np.asarray(eq_con(z), dtype=float)),
            ineq_con=lambda z: np.atleast_1d(np.asarray(ineq_con(z), dtype=float)),
            m_e=m_e,
            m_i=m_i,
            lb=lb,
            ub=ub,
            **kw,
        )


def _finite_sides(lo: np.ndarray, hi: np.ndarray):
    return np.flatnonzero(np.isfinite(lo)), np.flatnonzero(np.isfinite(hi))


def assemble_nlp(spec: OcpSpec) -> NlpProblem:
    """Transcribe ``spec`` into an :class:`NlpProblem`.

    Equalities are the collocation defects followed by the fixed terminal
    components. Inequalities are the state box on the computed midpoints
    (compressed form only; elsewhere state boxes are variable bounds) and the
    path constraints at ``k = 0.5, 1, ..., N``.
    """
    layout = layout_variables(spec)
    model = spec.model
    N, p = spec.N, model.p
    fixed_idx = spec.target.fixed_indices
    fixed_val = spec.target.fixed_values
    xlo, xhi = spec.x_bounds
    ulo, uhi = spec.u_bounds
    compressed = layout.form is CollocationForm.COMPRESSED
    lo_idx, hi_idx = _finite_sides(xlo, xhi)
    box_mid = compressed and (lo_idx.size or hi_idx.size)
    n_path = spec.n_path if spec.path_ineq is not None else 0

    def eq_con(z):
        z = np.asarray(z, dtype=float)
        defects = collocation_defects(spec, z, layout)
        x_end = z[layout.x_offset(N) : layout.x_offset(N) + p]
        return np.concatenate([defects, x_end[fixed_idx] - fixed_val])

    def ineq_con(z):
        z = np.asarray(z, dtype=float)
        parts = []
        if box_mid or n_path:
            dt, X, U = layout.unpack(z)
            xg = layout.grid_states(X)
            if compressed:
                x_mid = _evaluate_partitions(model, layout, z).x_mid
            else:
                x_mid = layout.mid_states(X)
            if box_mid:
                parts.append((xlo[lo_idx] - x_mid[:, lo_idx]).reshape(-1))
                parts.append((x_mid[:, hi_idx] - xhi[hi_idx]).reshape(-1))
            if n_path:
                parts.append(spec.eval_path(xg[1:]).reshape(-1))
                parts.append(spec.eval_path(x_mid).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    m_e = (1 if compressed else 2) * p * N + fixed_idx.size
    m_i = (N * (lo_idx.size + hi_idx.size) if box_mid else 0) + 2 * N * n_path

    lb = np.empty(layout.n_z)
    ub = np.empty(layout.n_z)
    lb[0], ub[0] = spec.dt_min, spec.dt_max
    lb[layout.x_start : layout.u_start] = np.tile(xlo, layout.n_xpts)
    ub[layout.x_start : layout.u_start] = np.tile(xhi, layout.n_xpts)
    lb[layout.x_start : layout.x_start + p] = spec.x_start
    ub[layout.x_start : layout.x_start + p] = spec.x_start
    lb[layout.u_start :] = np.tile(ulo, layout.n_upts)
    ub[layout.u_start :] = np.tile(uhi, layout.n_upts)

    names = []
    if box_mid:
        names += [f"x{i + 1}_mid{k}_lower" for k in range(N) for i in lo_idx]
        names += [f"x{i + 1}_mid{k}_upper" for k in range(N) for i in hi_idx]
    if n_path:
        names += [f"path{j + 1}_grid{k + 1}" for k in range(N) for j in range(n_path)]
        names += [f"path{j + 1}_mid{k}" for k in range(N) for j in range(n_path)]

    grad = np.zeros(layout.n_z)
    grad[0] = N
    return NlpProblem(
        n_z=layout.n_z,
        cost=lambda z: N * float(z[0]),
        cost_grad=lambda z: grad.copy(),
        eq_con=eq_con,
        ineq_con=ineq_con,
        m_e=m_e,
        m_i=m_i,
        lb=lb,
        ub=ub,
        jac_sparsity=sparsity_pattern(spec),
        layout=layout,
        spec=spec,
        ineq_names=names,
    )


def sparsity_pattern(spec: OcpSpec) -> dict:
    """Structural Jacobian pattern of the transcribed constraints.

    Each collocation block ``k`` touches only ``dt``, the states at ``k`` and
    ``k+1`` (and ``k+0.5`` when uncompressed) and the controls partition ``k``
    references; the ``dt`` column is therefore dense over all defect rows.
    The pattern assumes a generic, fully coupled vector field.
    """
    layout = layout_variables(spec)
    N, p = spec.N, spec.model.p
    compressed = layout.form is CollocationForm.COMPRESSED
    xlo, xhi = spec.x_bounds
    lo_idx, hi_idx = _finite_sides(xlo, xhi)
    n_path = spec.n_path if spec.path_ineq is not None else 0

    def grid_cols(k):
        return layout.state_columns(k if compressed else 2 * k)

    def mid_interp_cols(k):
        # Hermite midpoint: dt, both endpoint states, controls at both ends
        return [0] + grid_cols(k) + grid_cols(k + 1) + layout.control_columns(k, "ends")

    rows: list[int] = []
    cols: list[int] = []

    def add(row_ids, col_ids):
        for r in row_ids:
            rows.extend([r] * len(col_ids))
            cols.extend(col_ids)

    block = p if compressed else 2 * p
    for k in range(N):
        r0 = k * block
        simpson_cols = [0] + grid_cols(k) + grid_cols(k + 1) + layout.control_columns(k)
        if not compressed:
            simpson_cols += layout.state_columns(2 * k + 1)
        add(range(r0, r0 + p), sorted(set(simpson_cols)))
        if not compressed:
            add(range(r0 + p, r0 + 2 * p), sorted(set(mid_interp_cols(k) + layout.state_columns(2 * k + 1))))
    term_base = layout.x_offset(N)
    for i, comp in enumerate(spec.target.fixed_indices):
        add([N * block + i], [term_base + int(comp)])
    eq = (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int))

    rows, cols = [], []
    r = 0
    if compressed and (lo_idx.size or hi_idx.size):
        for side in (lo_idx, hi_idx):
            for k in range(N):
                mc = sorted(set(mid_interp_cols(k)))
                for _ in side:
                    add([r], mc)
                    r += 1
    if n_path:
        for k in range(N):
            for _ in range(n_path):
                add([r], grid_cols(k + 1))
                r += 1
        for k in range(N):
            mc = sorted(set(mid_interp_cols(k))) if compressed else layout.state_columns(2 * k + 1)
            for _ in range(n_path):
                add([r], mc)
                r += 1
    ineq = (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int))
    return {"eq": eq, "ineq": ineq}


def initial_guess(spec: OcpSpec, time_per_distance: float = 1.0) -> np.ndarray:
    """Straight-line initial decision vector.

    States are interpolated linearly from ``x_start`` towards the fixed target
    components (free components stay at their start value), controls sit at
    the centre of their box, and ``dt`` is ``time_per_distance`` times the
    start-target distance divided by ``N``, clamped to ``[dt_min, dt_max]``.
    """
    layout = layout_variables(spec)
    x_end = spec.x_start.copy()
    fi = spec.target.fixed_indices
    x_end[fi] = spec.target.fixed_values
    s = layout.x_keys / spec.N
    X = spec.x_start[None, :] + s[:, None] * (x_end - spec.x_start)[None, :]
    ulo, uhi = spec.u_bounds
    U = np.tile(0.5 * (ulo + uhi), (layout.n_upts, 1))
    t_guess = time_per_distance * spec.target.distance(spec.x_start)
    dt = float(np.clip(t_guess / spec.N, spec.dt_min, spec.dt_max))
    if dt <= 0.0:
        dt = min(DT_GUESS_FLOOR, spec.dt_max)
    return layout.pack(dt, X, U)
