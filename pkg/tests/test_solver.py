import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FROZEN
from tocol.solver import (
    SolverConfig,
    Status,
    color_columns,
    constraint_violation,
    dense_fd_jacobian,
    fd_jacobian,
    kkt_residual,
    solve,
)
from tocol.systems import make_double_integrator, make_vdp
from tocol.transcription import NlpProblem, OcpSpec, TargetSpec, assemble_nlp, initial_guess, sparsity_pattern

R2 = math.sqrt(2.0) / 2.0


def circle_problem():
    return NlpProblem.from_functions(
        2, cost=lambda z: z[0] + z[1], eq_con=lambda z: [z[0] ** 2 + z[1] ** 2 - 1.0]
    )


def test_scalar_quadratic():
    nlp = NlpProblem.from_functions(1, cost=lambda z: (z[0] - 3.0) ** 2)
    res = solve(nlp, [0.0])
    assert res.status is Status.OPTIMAL
    assert res.z_opt[0] == pytest.approx(3.0, abs=1e-6)


def test_circle():
    res = solve(circle_problem(), [0.5, 0.1])
    assert res.success
    assert res.z_opt == pytest.approx([-R2, -R2], abs=1e-6)
    assert res.lam[0] == pytest.approx(R2, abs=1e-5)


def test_inequality_active():
    # min (z-3)^2 s.t. z <= 1: minimizer on the constraint, multiplier 4
    nlp = NlpProblem.from_functions(1, cost=lambda z: (z[0] - 3.0) ** 2, ineq_con=lambda z: [z[0] - 1.0])
    res = solve(nlp, [0.0])
    assert res.success
    assert res.z_opt[0] == pytest.approx(1.0, abs=1e-6)
    assert res.mu[0] == pytest.approx(4.0, abs=1e-4)


def test_inequality_inactive():
    nlp = NlpProblem.from_functions(1, cost=lambda z: (z[0] - 3.0) ** 2, ineq_con=lambda z: [z[0] - 5.0])
    res = solve(nlp, [0.0])
    assert res.success
    assert res.z_opt[0] == pytest.approx(3.0, abs=1e-6)
    assert res.mu[0] == pytest.approx(0.0, abs=1e-8)


def test_box_bound_active():
    nlp = NlpProblem.from_functions(1, cost=lambda z: (z[0] - 3.0) ** 2, lb=[-1.0], ub=[2.0])
    res = solve(nlp, [0.0])
    assert res.success
    assert res.z_opt[0] == 2.0


def test_start_is_clipped_into_box():
    nlp = NlpProblem.from_functions(1, cost=lambda z: z[0] ** 2, lb=[1.0], ub=[4.0])
    res = solve(nlp, [-10.0])
    assert res.z_opt[0] == 1.0


def test_optimal_status_implies_tolerances():
    cfg = SolverConfig()
    res = solve(circle_problem(), [0.5, 0.1], cfg)
    assert res.kkt_residual <= cfg.kkt_tol
    assert res.constraint_violation <= cfg.constraint_tol


def test_double_integrator_oracle():
    spec = OcpSpec(make_double_integrator(), [0, 0], TargetSpec.point([1.0, 0]), (-1, 1), N=50)
    nlp = assemble_nlp(spec)
    res = solve(nlp, initial_guess(spec))
    assert res.success
    assert nlp.cost(res.z_opt) == pytest.approx(FROZEN["di_min_time"][1.0], rel=0.02)


def test_infeasible_is_reported():
    nlp = NlpProblem.from_functions(1, cost=lambda z: z[0] ** 2, eq_con=lambda z: [z[0] ** 2 + 1.0])
    res = solve(nlp, [0.3], SolverConfig(max_outer_iters=40))
    assert res.status is Status.INFEASIBLE
    assert not res.success


def test_nonfinite_start_is_numerical_failure():
    nlp = NlpProblem.from_functions(1, cost=lambda z: math.log(z[0]) if z[0] > 0 else math.nan)
    res = solve(nlp, [-1.0])
    assert res.status is Status.NUMERICAL_FAILURE
    assert res.iterations == 0


def test_wrong_start_length():
    with pytest.raises(ValueError):
        solve(circle_problem(), [0.0, 0.0, 0.0])


def test_max_iters_status():
    res = solve(circle_problem(), [0.5, 0.1], SolverConfig(max_outer_iters=1, max_inner_iters=1))
    assert res.status is Status.MAX_ITERS


def test_deterministic():
    spec = OcpSpec(make_vdp(), [0, 0], TargetSpec.point([0.8, 0]), (-1, 1), N=8)
    nlp = assemble_nlp(spec)
    a = solve(nlp, initial_guess(spec))
    b = solve(nlp, initial_guess(spec))
    assert np.array_equal(a.z_opt, b.z_opt)
    assert a.history == b.history
    assert a.iterations == b.iterations


def test_feasibility_monotone_or_penalty_grows():
    spec = OcpSpec(make_vdp(), [0, 0], TargetSpec.point([0.8, 0]), (-1, 1), N=15)
    res = solve(assemble_nlp(spec), initial_guess(spec))
    assert res.success
    tol = SolverConfig().constraint_tol
    hist = res.history
    # once inside the tolerance band, roundoff-level wiggles are not progress failures
    for (v0, r0, _), (v1, r1, _) in zip(hist[1:], hist[2:]):
        assert v1 <= max(v0, tol) or r1 > r0


@pytest.mark.parametrize(
    "kw",
    [
        dict(kkt_tol=0.0),
        dict(constraint_tol=-1.0),
        dict(max_outer_iters=0),
        dict(max_inner_iters=0),
        dict(penalty_init=0.0),
        dict(penalty_growth=1.0),
        dict(fd_step=0.0),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


@settings(max_examples=25, deadline=None)
@given(
    lo=st.floats(-3, 0.5),
    width=st.floats(0.0, 3.0),
    target=st.floats(-5, 5),
    z0=st.floats(-10, 10),
)
def test_box_respected(lo, width, target, z0):
    hi = lo + width
    seen = []

    def cost(z):
        seen.append(z.copy())
        return (z[0] - target) ** 2 + 0.1 * (z[1] - target) ** 4

    nlp = NlpProblem.from_functions(2, cost=cost, eq_con=lambda z: [z[0] - z[1] ** 3], lb=[lo, lo], ub=[hi, hi])
    seen.clear()
    res = solve(nlp, [z0, z0])
    assert np.all(res.z_opt >= lo) and np.all(res.z_opt <= hi)
    # every evaluated point (iterates and difference probes) lies in the box
    pts = np.array(seen)
    assert np.all(pts >= lo) and np.all(pts <= hi)


def test_dt_never_negative_during_solve():
    spec = OcpSpec(make_double_integrator(), [0, 0], TargetSpec.point([1, 0]), (-1, 1), N=10)
    nlp = assemble_nlp(spec)
    dts = []
    base = nlp.eq_con

    def spy(z):
        dts.append(z[0])
        return base(z)

    nlp.eq_con = spy
    solve(nlp, initial_guess(spec))
    assert min(dts) >= 0.0


# --- finite differences


def test_fd_identity():
    n = 6
    pattern = (np.arange(n), np.arange(n))
    J = fd_jacobian(lambda z: z.copy(), np.linspace(-1, 1, n), pattern)
    assert sp.issparse(J)
    assert np.allclose(J.toarray(), np.eye(n), atol=1e-9)


def test_fd_identity_with_padded_pattern():
    n = 4
    r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    J = fd_jacobian(lambda z: z.copy(), np.ones(n), (r.ravel(), c.ravel()))
    assert np.allclose(J.toarray(), np.eye(n), atol=1e-9)


def test_fd_square():
    h = 1e-7
    J = fd_jacobian(lambda z: z**2, np.array([2.0]), ([0], [0]), fd_step=h)
    assert J[0, 0] == pytest.approx(4.0, abs=10 * h * 3)


def test_fd_flips_at_upper_bound():
    J = fd_jacobian(lambda z: np.sqrt(1.0 - z), np.array([1.0 - 1e-9]), ([0], [0]), ub=np.array([1.0]))
    assert np.isfinite(J[0, 0])


@pytest.mark.parametrize("param", ["quadratic", "linear", "mean", "constant"])
@pytest.mark.parametrize("form,cap", [("compressed", 8), ("uncompressed", 10)])
def test_collocation_groups_bounded(param, form, cap):
    counts = []
    for N in (20, 40):
        spec = OcpSpec(make_vdp(), [0, 0], TargetSpec.point([0.8, 0]), (-1, 1), N=N, param=param, form=form)
        nlp = assemble_nlp(spec)
        counts.append(len(color_columns(*nlp.jac_sparsity["eq"], nlp.n_z)))
    assert counts[0] <= cap
    assert counts[0] == counts[1]


def test_fd_matches_dense_on_collocation():
    spec = OcpSpec(make_vdp(), [0, 0], TargetSpec.point([0.8, 0]), (-1, 1), N=20, param="quadratic")
    nlp = assemble_nlp(spec)
    z = initial_guess(spec) + np.random.default_rng(3).normal(0, 0.1, nlp.n_z)
    z[0] = 0.07
    J = fd_jacobian(nlp.eq_con, z, nlp.jac_sparsity["eq"])
    assert np.abs(J.toarray() - dense_fd_jacobian(nlp.eq_con, z)).max() <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 11)), min_size=1, max_size=40))
def test_coloring_is_valid(entries):
    rows, cols = map(np.array, zip(*entries))
    groups = color_columns(rows, cols, 12)
    assert sorted(np.concatenate(groups).tolist()) == list(range(12))
    for grp in groups:
        members = set(grp.tolist())
        touched = [r for r, c in entries if c in members]
        per_row = {}
        for r, c in entries:
            if c in members:
                per_row.setdefault(r, set()).add(c)
        assert all(len(s) == 1 for s in per_row.values()), touched


def test_sparsity_helper_agrees_with_problem():
    spec = OcpSpec(make_vdp(), [0, 0], TargetSpec.point([0.8, 0]), (-1, 1), N=5)
    rows, cols = sparsity_pattern(spec)["eq"]
    nlp_rows, nlp_cols = assemble_nlp(spec).jac_sparsity["eq"]
    assert set(zip(rows.tolist(), cols.tolist())) == set(zip(nlp_rows.tolist(), nlp_cols.tolist()))


# --- optimality measure


def test_kkt_unconstrained_minimizer():
    nlp = NlpProblem.from_functions(2, cost=lambda z: (z[0] - 1.0) ** 2 + (z[1] + 2.0) ** 2, cost_grad=lambda z: 2 * (z - [1.0, -2.0]))
    assert kkt_residual(nlp, [1.0, -2.0], [], []) <= 1e-10


def test_kkt_active_bound_absorbs_gradient():
    nlp = NlpProblem.from_functions(1, cost=lambda z: z[0], cost_grad=lambda z: np.ones(1), lb=[0.0], ub=[1.0])
    assert kkt_residual(nlp, [0.0], [], []) == 0.0
    assert kkt_residual(nlp, [0.5], [], []) == pytest.approx(0.5)


def test_kkt_circle():
    assert kkt_residual(circle_problem(), [-R2, -R2], [R2], []) <= 1e-6
    assert kkt_residual(circle_problem(), [-R2, -R2], [0.0], []) > 0.5


def test_kkt_counts_complementarity():
    nlp = NlpProblem.from_functions(
        1, cost=lambda z: z[0] ** 2, ineq_con=lambda z: [z[0] - 1.0], cost_grad=lambda z: 2 * z
    )
    assert kkt_residual(nlp, [0.0], [], [0.0]) == 0.0
    # positive multiplier on an inactive constraint breaks complementarity and stationarity
    assert kkt_residual(nlp, [0.0], [], [0.5]) >= 0.5


def test_kkt_size_mismatch():
    with pytest.raises(ValueError):
        kkt_residual(circle_problem(), [0.0, 0.0], [1.0, 2.0], [])


def test_constraint_violation_norm():
    nlp = NlpProblem.from_functions(
        1, cost=lambda z: 0.0, eq_con=lambda z: [z[0] - 1.0, -2.0 * z[0]], ineq_con=lambda z: [z[0] - 0.5, -z[0]]
    )
    assert constraint_violation(nlp, [0.0]) == 1.0
    assert constraint_violation(nlp, [2.0]) == 4.0
