"""Augmented-Lagrangian NLP solver with sparse finite-difference derivatives.

Equalities and inequalities are moved into a Powell-Hestenes-Rockafellar
augmented Lagrangian; variable bounds are kept as hard boxes and handled by
projection in the inner method, so every iterate is box-feasible.

The inner method is a box-constrained quasi-Newton iteration with a
structured Hessian model: the penalty curvature ``rho * J^T J`` is formed
exactly from the sparse finite-difference Jacobian and only the remaining
Lagrangian curvature is approximated by symmetric rank-one updates. That
remainder is typically indefinite (it carries the constraint curvature
weighted by signed multipliers), which SR1 can represent and BFGS cannot.
Each step minimizes the convexified model exactly over the box; negative
eigenvalues of the model are reflected, not shifted away.

Inequalities ``g(z) <= 0`` use slacks ``s >= 0`` with ``g(z) + s = 0``. The
slack subproblem is separable and is minimized in closed form, giving the
usual ``max(0, mu + rho * g)`` shifted penalty.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import lsq_linear

from .transcription import NlpProblem

log = logging.getLogger(__name__)

RHO_MAX = 1e10
# violations below this multiple of constraint_tol never trigger a rejected
# outer step; from a nearly feasible start a strict floor would escalate the
# penalty into a regime where the inner loop cannot converge
REJECT_FLOOR = 1e3
# cost weight kept during the feasibility phase; a small pull keeps dt from
# drifting to a spurious stationary point of the violation
FEAS_COST_WEIGHT = 1e-2
# initial curvature model: this fraction of the diagonal of rho * J^T J
CURV_INIT = 1e-3
# consecutive noise-level steps after which the inner loop gives up
FLAT_STEPS = 3


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITERS = "max_iters"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass(frozen=True)
class SolverConfig:
    kkt_tol: float = 1e-6
    constraint_tol: float = 1e-6
    max_outer_iters: int = 50
    max_inner_iters: int = 200
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    fd_step: float = 1e-7

    def __post_init__(self):
        for name in ("kkt_tol", "constraint_tol", "max_outer_iters", "max_inner_iters", "penalty_init", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth must exceed 1")


@dataclass
class SolverResult:
    z_opt: np.ndarray
    status: Status
    kkt_residual: float
    constraint_violation: float
    iterations: int
    function_evals: int
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    penalty: float = 0.0
    outer_iterations: int = 0
    wall_time: float = 0.0
    history: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status is Status.OPTIMAL


# ---------------------------------------------------------------------------
# sparse finite differences


def color_columns(rows: np.ndarray, cols: np.ndarray, n_cols: int) -> list[np.ndarray]:
    """Greedy distance-2 coloring of the column intersection graph.

    Columns that never share a row receive the same color and can be
    perturbed together. Returns one index array per color.
    """
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    col_rows: list[list[int]] = [[] for _ in range(n_cols)]
    for r, c in zip(rows.tolist(), cols.tolist()):
        col_rows[c].append(r)
    row_colors: dict[int, set] = {}
    color = np.full(n_cols, -1, dtype=int)
    for c in range(n_cols):
        taken: set = set()
        for r in col_rows[c]:
            taken |= row_colors.get(r, set())
        k = 0
        while k in taken:
            k += 1
        color[c] = k
        for r in col_rows[c]:
            row_colors.setdefault(r, set()).add(k)
    n_colors = int(color.max()) + 1 if n_cols else 0
    return [np.flatnonzero(color == k) for k in range(n_colors)]


def fd_jacobian(
    fun: Callable[[np.ndarray], np.ndarray],
    z,
    pattern,
    *,
    fd_step: float = 1e-7,
    f0: Optional[np.ndarray] = None,
    groups: Optional[list] = None,
    lb: Optional[np.ndarray] = None,
    ub: Optional[np.ndarray] = None,
) -> sp.csr_matrix:
    """Forward-difference Jacobian restricted to a sparsity pattern.

    Parameters
    ----------
    fun : callable
        Constraint function ``z -> c(z)``.
    z : array_like
    pattern : (rows, cols)
        Structurally nonzero entries; must be complete.
    fd_step : float
        Relative step, ``h_i = fd_step * (1 + |z_i|)``, adjusted by
        :func:`fd_steps` so that no probe leaves ``[lb, ub]``.
    f0 : array_like, optional
        ``fun(z)`` if already known.
    groups : list of index arrays, optional
        Precomputed column coloring (see :func:`color_columns`).

    Returns
    -------
    scipy.sparse.csr_matrix
    """
    z = np.asarray(z, dtype=float)
    n = z.size
    rows, cols = (np.asarray(a, dtype=int) for a in pattern)
    if f0 is None:
        f0 = np.asarray(fun(z), dtype=float)
    m = f0.size
    if groups is None:
        groups = color_columns(rows, cols, n)
    h = fd_steps(z, fd_step, lb, ub)
    vals = np.zeros(rows.size)
    order = np.argsort(cols, kind="stable")
    starts = np.searchsorted(cols[order], np.arange(n + 1))
    for grp in groups:
        zp = z.copy()
        zp[grp] += h[grp]
        df = np.asarray(fun(zp), dtype=float) - f0
        for c in grp:
            sel = order[starts[c] : starts[c + 1]]
            if sel.size and h[c] != 0.0:
                vals[sel] = df[rows[sel]] / h[c]
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, n))


def fd_steps(z, fd_step: float, lb=None, ub=None) -> np.ndarray:
    """Per-variable forward-difference steps that keep ``z + h`` inside the box.

    The step flips sign when the forward point would cross ``ub`` and shrinks
    to the larger side of the box when the box is narrower than the step; a
    fixed variable gets ``h = 0`` (its column is left empty).
    """
    z = np.asarray(z, dtype=float)
    h = fd_step * (1.0 + np.abs(z))
    lb = np.full(z.size, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(z.size, np.inf) if ub is None else np.asarray(ub, dtype=float)
    room_up, room_down = ub - z, z - lb
    h = np.where(room_up >= h, h, np.where(room_down >= h, -h, 0.0))
    narrow = h == 0.0
    return np.where(narrow & (room_up >= room_down), room_up, np.where(narrow, -room_down, h))


def dense_fd_jacobian(fun, z, fd_step: float = 1e-7) -> np.ndarray:
    """Column-by-column forward differences, no structure assumed."""
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z), dtype=float)
    J = np.zeros((f0.size, z.size))
    for j in range(z.size):
        h = fd_step * (1.0 + abs(z[j]))
        zp = z.copy()
        zp[j] += h
        J[:, j] = (np.asarray(fun(zp), dtype=float) - f0) / h
    return J


# ---------------------------------------------------------------------------
# optimality measures


def _dense_pattern(m: int, n: int):
    r, c = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    return r.ravel(), c.ravel()


class _Derivatives:
    """Caches colorings and evaluates the stacked constraint Jacobian of an NLP."""

    def __init__(self, nlp: NlpProblem, fd_step: float):
        self.nlp = nlp
        self.fd_step = fd_step
        eq_pat = nlp.jac_sparsity.get("eq") or _dense_pattern(nlp.m_e, nlp.n_z)
        in_pat = nlp.jac_sparsity.get("ineq") or _dense_pattern(nlp.m_i, nlp.n_z)
        self.rows = np.concatenate([eq_pat[0], in_pat[0] + nlp.m_e]).astype(int)
        self.cols = np.concatenate([eq_pat[1], in_pat[1]]).astype(int)
        self.groups = color_columns(self.rows, self.cols, nlp.n_z)
        self.n_evals = 0

    def constraints(self, z):
        self.n_evals += 1
        return np.concatenate([self.nlp.eq_con(z), self.nlp.ineq_con(z)])

    def cost_grad(self, z):
        if self.nlp.cost_grad is not None:
            return np.asarray(self.nlp.cost_grad(z), dtype=float)
        c0 = self.nlp.cost(z)
        h = fd_steps(z, self.fd_step, self.nlp.lb, self.nlp.ub)
        g = np.zeros(z.size)
        for j in np.flatnonzero(h):
            zp = z.copy()
            zp[j] += h[j]
            g[j] = (self.nlp.cost(zp) - c0) / h[j]
        return g

    def jacobian(self, z, c0=None):
        if c0 is None:
            c0 = self.constraints(z)
        J = fd_jacobian(
            self.constraints, z, (self.rows, self.cols), fd_step=self.fd_step, f0=c0,
            groups=self.groups, lb=self.nlp.lb, ub=self.nlp.ub,
        )
        return J


def kkt_residual(nlp: NlpProblem, z, lam, mu, *, fd_step: float = 1e-7, _deriv=None) -> float:
    """Infinity norm of the first-order optimality conditions.

    Stacks projected stationarity of the Lagrangian
    ``cost + lam . eq + mu . ineq`` (projection onto the variable box, so an
    outward gradient at an active bound does not count), complementarity
    ``|mu_i * g_i|``, dual sign violation ``max(0, -mu_i)`` and primal
    infeasibility.
    """
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if lam.size != nlp.m_e or mu.size != nlp.m_i:
        raise ValueError("multiplier sizes do not match the constraint counts")
    deriv = _deriv or _Derivatives(nlp, fd_step)
    c = deriv.constraints(z)
    h, g = c[: nlp.m_e], c[nlp.m_e :]
    grad = deriv.cost_grad(z)
    if c.size:
        J = deriv.jacobian(z, c)
        grad = grad + J.T @ np.concatenate([lam, mu])
    stat = np.abs(z - np.clip(z - grad, nlp.lb, nlp.ub))
    parts = [stat.max(initial=0.0)]
    if h.size:
        parts.append(np.abs(h).max())
    if g.size:
        parts += [np.maximum(g, 0).max(), np.abs(mu * g).max(), np.maximum(-mu, 0).max()]
    return float(max(parts))


def constraint_violation(nlp: NlpProblem, z) -> float:
    h = nlp.eq_con(z)
    g = nlp.ineq_con(z)
    return float(max(np.abs(h).max(initial=0.0), np.maximum(g, 0).max(initial=0.0)))


# ---------------------------------------------------------------------------
# augmented Lagrangian


class _AugLag:
    """Augmented Lagrangian of a scaled NLP for fixed multipliers and penalty."""

    def __init__(self, nlp: NlpProblem, deriv: _Derivatives, obj_scale: float):
        self.nlp = nlp
        self.deriv = deriv
        self.obj_scale = obj_scale
        self.lam = np.zeros(nlp.m_e)
        self.mu = np.zeros(nlp.m_i)
        self.rho = 1.0

    def value(self, z, c=None):
        if c is None:
            c = self.deriv.constraints(z)
        m_e = self.nlp.m_e
        h, g = c[:m_e], c[m_e:]
        w_i = np.maximum(0.0, self.mu + self.rho * g)
        val = (
            self.obj_scale * self.nlp.cost(z) + self.lam @ h + 0.5 * self.rho * (h @ h)
            + (w_i @ w_i - self.mu @ self.mu) / (2.0 * self.rho)
        )
        return float(val), c

    def weights(self, c):
        m_e = self.nlp.m_e
        return np.concatenate([self.lam + self.rho * c[:m_e], np.maximum(0.0, self.mu + self.rho * c[m_e:])])

    def gradient(self, z, c, J):
        grad = self.obj_scale * self.deriv.cost_grad(z)
        if c.size:
            grad = grad + J.T @ self.weights(c)
        return grad


def _projected_qn(al: _AugLag, z, tol: float, max_iter: int, B: Optional[np.ndarray] = None, bounds=None):
    """Minimize the augmented Lagrangian over the variable box.

    Returns ``(z, iterations, B)``; ``B`` is the SR1 model of the Lagrangian
    curvature, carried across outer iterations. ``bounds`` overrides the
    problem box (used to freeze variables).
    """
    nlp = al.nlp
    lb, ub = bounds if bounds is not None else (nlp.lb, nlp.ub)
    n = z.size
    m_e = nlp.m_e
    phi, c = al.value(z)
    J = al.deriv.jacobian(z, c) if c.size else sp.csr_matrix((0, n))
    if B is None:
        # scaled like the penalty curvature, so columns with tiny sensitivities
        # (controls at small dt) are not swamped by an isotropic start
        dj = np.asarray(J.multiply(J).sum(axis=0)).ravel() * al.rho
        base = max(al.obj_scale, 1e-8 * dj.max(initial=0.0), 1e-12)
        B = np.diag(CURV_INIT * dj + 1e-2 * base)
    grad = al.gradient(z, c, J)
    movable = lb < ub
    it = 0
    flat = 0
    while it < max_iter:
        pg = z - np.clip(z - grad, lb, ub)
        pg_norm = float(np.abs(pg).max(initial=0.0))
        if pg_norm <= tol:
            break
        it += 1
        d = _box_qp_step(al, z, c, J, B, grad, movable, lb, ub)
        # Armijo backtracking; the segment to z + d stays in the box
        alpha = 1.0
        accepted = False
        for _ in range(40):
            z_new = np.clip(z + alpha * d, lb, ub)
            step = z_new - z
            try:
                phi_new, c_new = al.value(z_new)
            except (ArithmeticError, ValueError):
                phi_new = np.inf
            slack = 10.0 * np.finfo(float).eps * abs(phi)
            if np.isfinite(phi_new) and phi_new <= phi + 1e-4 * (grad @ step) + slack:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        J_new = al.deriv.jacobian(z_new, c_new) if c_new.size else J
        grad_new = al.gradient(z_new, c_new, J_new)
        # secant pair for the curvature not captured by rho * J^T J
        w = al.weights(c_new)
        y = al.obj_scale * (al.deriv.cost_grad(z_new) - al.deriv.cost_grad(z))
        if c_new.size:
            y = y + (J_new - J).T @ w
        B = _sr1(B, step, y)
        # steps accepted only through the noise slack make no real progress
        flat = flat + 1 if phi - phi_new <= slack else 0
        z, phi, c, J, grad = z_new, phi_new, c_new, J_new, grad_new
        if flat >= FLAT_STEPS or np.abs(step).max(initial=0.0) <= 1e-15 * (1.0 + np.abs(z).max()):
            break
    return z, it, B


def _box_qp_step(al: _AugLag, z, c, J, B, grad, movable, lb, ub) -> np.ndarray:
    """Minimizer of the local quadratic model subject to the variable box.

    The model Hessian is positive definite, so with ``H = L L^T`` the
    subproblem is the bounded least-squares problem
    ``min |L^T d + L^{-1} g|`` and is solved exactly by BVLS. The returned
    step keeps ``z + alpha * d`` inside the box for every ``alpha`` in [0, 1].
    """
    nlp = al.nlp
    n = z.size
    rows = np.ones(c.size, dtype=bool)
    if nlp.m_i:
        # inequality rows contribute curvature only while their shifted penalty is active
        rows[nlp.m_e :] = (al.mu + al.rho * c[nlp.m_e :]) > 0
    Jm = J[rows][:, movable]
    H = al.rho * (Jm.T @ Jm).toarray() + B[np.ix_(movable, movable)]
    scale = 1.0 + np.abs(np.diag(H)).max(initial=0.0)
    lo = (lb - z)[movable]
    hi = (ub - z)[movable]
    d = np.zeros(n)
    try:
        L = _pd_cholesky(H, scale)
        rhs = -solve_triangular(L, grad[movable], lower=True)
        sol = lsq_linear(L.T, rhs, bounds=(lo, hi), method="bvls")
        d[movable] = np.clip(sol.x, lo, hi)
    except (np.linalg.LinAlgError, ValueError):
        d[movable] = np.clip(-grad[movable], lo, hi)
    if not np.all(np.isfinite(d)) or grad @ d >= 0:
        d = np.clip(-grad, lb - z, ub - z)
    return d


def _pd_cholesky(H: np.ndarray, scale: float) -> np.ndarray:
    """Cholesky factor of ``H``, or of ``H`` with its spectrum made positive.

    Negative eigenvalues are reflected rather than shifted away: a uniform
    shift large enough to cancel one strongly negative direction would
    flatten the step in every other direction.
    """
    floor = 1e-12 * scale
    try:
        return cholesky(H + floor * np.eye(H.shape[0]), lower=True)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(H)
        H = (V * np.maximum(np.abs(w), 1e-8 * scale)) @ V.T
        return cholesky(0.5 * (H + H.T) + floor * np.eye(H.shape[0]), lower=True)


def _sr1(B: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Symmetric rank-one update, skipped when the denominator is unsafe."""
    r = y - B @ s
    rs = float(r @ s)
    if abs(rs) <= 1e-8 * np.linalg.norm(r) * np.linalg.norm(s):
        return B
    return B + np.outer(r, r) / rs


def _violation(c: np.ndarray, m_e: int) -> float:
    return float(max(np.abs(c[:m_e]).max(initial=0.0), np.maximum(c[m_e:], 0).max(initial=0.0)))


def solve(nlp: NlpProblem, z0, cfg: Optional[SolverConfig] = None) -> SolverResult:
    """Solve ``nlp`` from ``z0`` (clipped into the variable box first).

    A penalty phase with a heavily down-weighted cost first pulls the start
    point towards the feasible set; a straight-line initial trajectory is usually dynamically
    inconsistent and would otherwise let the cost drive ``dt`` onto its lower
    bound before the dynamics are resolved. The augmented-Lagrangian loop
    then alternates inner minimization, first-order multiplier updates and a
    penalty increase whenever the violation fails to shrink by a factor 4.
    The objective is scaled to unit gradient norm internally; reported
    multipliers refer to the unscaled problem.
    """
    cfg = cfg or SolverConfig()
    t_start = time.perf_counter()
    z = np.clip(np.asarray(z0, dtype=float).copy(), nlp.lb, nlp.ub)
    if z.shape != (nlp.n_z,):
        raise ValueError(f"z0 must have length {nlp.n_z}")
    m_e, m_i = nlp.m_e, nlp.m_i
    deriv = _Derivatives(nlp, cfg.fd_step)
    state = {"lam": np.zeros(m_e), "mu": np.zeros(m_i), "rho": cfg.penalty_init, "scale": 1.0}

    def result(status, kkt, viol, iters, outer, hist):
        s_ = state["scale"]
        return SolverResult(
            z_opt=z, status=status, kkt_residual=kkt, constraint_violation=viol,
            iterations=iters, function_evals=deriv.n_evals, lam=state["lam"] / s_,
            mu=state["mu"] / s_, penalty=state["rho"], outer_iterations=outer,
            wall_time=time.perf_counter() - t_start, history=hist,
        )

    try:
        c0 = deriv.constraints(z)
        f0 = nlp.cost(z)
    except (ArithmeticError, ValueError) as exc:
        log.debug("evaluation failed at z0: %s", exc)
        return result(Status.NUMERICAL_FAILURE, np.inf, np.inf, 0, 0, [])
    if not (np.isfinite(f0) and np.all(np.isfinite(c0))):
        return result(Status.NUMERICAL_FAILURE, np.inf, np.inf, 0, 0, [])

    iters = 0
    g0 = deriv.cost_grad(z)
    obj_scale = 1.0 / max(1.0, float(np.abs(g0).max(initial=0.0)))
    state["scale"] = obj_scale
    al = _AugLag(nlp, deriv, obj_scale)

    viol_init = _violation(c0, m_e)
    try:
        if viol_init > cfg.constraint_tol and c0.size:
            al.obj_scale = FEAS_COST_WEIGHT * obj_scale
            al.rho = 1.0
            z, it, _ = _projected_qn(al, z, 1e-3 * cfg.constraint_tol, cfg.max_inner_iters)
            iters += it
            al.obj_scale = obj_scale
            c0 = deriv.constraints(z)
            log.debug("feasibility phase: %d iterations, violation %.3e", it, _violation(c0, m_e))
        if m_e:
            # least-squares multiplier estimate for the scaled cost
            J0 = deriv.jacobian(z, c0)[:m_e]
            free = (z > nlp.lb) & (z < nlp.ub)
            A = J0[:, free].toarray().T
            al.lam = -np.linalg.lstsq(A, obj_scale * g0[free], rcond=None)[0]
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.debug("initialization failed: %s", exc)
        return result(Status.NUMERICAL_FAILURE, np.inf, np.inf, iters, 0, [])

    al.rho = cfg.penalty_init
    history = []
    viol = _violation(c0, m_e)
    viol_prev = np.inf
    stall = 0
    inner_tol = 1e-3
    status = Status.MAX_ITERS
    kkt = np.inf
    outer = 0
    B = None
    viol_ref = viol
    for outer in range(1, cfg.max_outer_iters + 1):
        z_prev, B_prev = z, B
        try:
            z, it, B = _projected_qn(al, z, inner_tol, cfg.max_inner_iters, B)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.debug("inner solve failed: %s", exc)
            status = Status.NUMERICAL_FAILURE
            break
        iters += it
        c = deriv.constraints(z)
        h, g = c[:m_e], c[m_e:]
        viol = _violation(c, m_e)
        if viol > max(10.0 * viol_ref, 0.1 * viol_init, REJECT_FLOOR * cfg.constraint_tol) and al.rho < RHO_MAX:
            # the penalty was too weak to hold the iterate near the feasible set
            log.debug("outer %d: rejected, viol %.3e -> %.3e", outer, viol_ref, viol)
            z, B = z_prev, B_prev
            viol = viol_ref
            al.rho = min(al.rho * cfg.penalty_growth, RHO_MAX)
            history.append((viol, al.rho, kkt))
            continue
        al.lam = al.lam + al.rho * h
        al.mu = np.maximum(0.0, al.mu + al.rho * g)
        state.update(lam=al.lam, mu=al.mu, rho=al.rho)
        kkt = kkt_residual(nlp, z, al.lam / obj_scale, al.mu / obj_scale, _deriv=deriv)
        history.append((viol, al.rho, kkt))
        log.debug("outer %d: viol=%.3e rho=%.1e kkt=%.3e inner=%d", outer, viol, al.rho, kkt, it)
        if viol <= cfg.constraint_tol and kkt <= cfg.kkt_tol:
            status = Status.OPTIMAL
            break
        if viol > cfg.constraint_tol and viol > 0.25 * viol_prev:
            if al.rho >= RHO_MAX:
                stall += 1
                if stall >= 3:
                    status = Status.INFEASIBLE
                    break
            al.rho = min(al.rho * cfg.penalty_growth, RHO_MAX)
        else:
            stall = 0
        viol_prev = viol
        viol_ref = max(viol, cfg.constraint_tol)
        inner_tol = max(0.1 * cfg.kkt_tol * obj_scale, 0.1 * inner_tol)
    state.update(rho=al.rho)
    return result(status, kkt, viol, iters, outer, history)


def restore_feasibility(nlp: NlpProblem, z0, frozen=None, *, max_iter: int = 50, fd_step: float = 1e-7):
    """Minimize the squared constraint violation with ``frozen`` variables held.

    Returns ``(z, violation)``. Used to repair a start point at a fixed
    horizon before handing it to :func:`solve`.
    """
    z = np.clip(np.asarray(z0, dtype=float).copy(), nlp.lb, nlp.ub)
    deriv = _Derivatives(nlp, fd_step)
    al = _AugLag(nlp, deriv, 0.0)
    frozen = np.zeros(nlp.n_z, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    box = (np.where(frozen, z, nlp.lb), np.where(frozen, z, nlp.ub))
    try:
        if nlp.m_e + nlp.m_i:
            z, _, _ = _projected_qn(al, z, 1e-9, max_iter, bounds=box)
        return z, _violation(deriv.constraints(z), nlp.m_e)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.debug("restoration failed: %s", exc)
        return z, np.inf
