import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfbdsde.adjoint import solve_adjoint
from mfbdsde.bdsde import RegressionConfig, SolverConfig, solve_mf_bdsde
from mfbdsde.control import (OptimizerConfig, box_residual, convexity_probe, cost_of, evaluate_cost, gateaux_derivative,
                             optimize, project, smp_residual, solve_variational, variational_convergence,
                             verify_sufficiency)
from mfbdsde.drivers import build_grid, sample_paths, tree_paths
from mfbdsde.errors import InvalidArgumentError
from mfbdsde.instances import scalar_interaction_problem, shipped_lq_problem
from mfbdsde.law import LinearTerm, QuadraticInitial, QuadraticTerm, ScalarTerm
from mfbdsde.problems import Box, LqCoefficients, ProblemSpec, constant_terminal, lq_problem

TREE = SolverConfig(RegressionConfig(mode="tree-exact"), picard_tol=1e-15, max_picard=200)


def tracking_problem(c, box=None, drift=None):
    """``h = (u - c)^2 / 2`` with dynamics that ignore the control."""
    h = ScalarTerm(lambda t, y, z, u, r: 0.5 * (u - c) ** 2,
                   lambda t, y, z, u, r: (0 * u, 0 * u, u - c, 0 * u))
    return ProblemSpec(drift or LinearTerm((0.3, 0.0, 0.0)), LinearTerm(), h, QuadraticInitial(),
                       constant_terminal(1.0), box or Box())


def _paths(n=5, N=200, seed=0):
    return sample_paths(build_grid(1.0, n), N, seed=seed)


# Cost ---------------------------------------------------------------------------------

def test_cost_of_pure_control_penalty():
    problem = lq_problem(LqCoefficients(h3=1.0))
    cost, _ = cost_of(problem, 1.0, _paths())
    assert cost.value == pytest.approx(0.5, abs=1e-14)


def test_cost_of_constant_state():
    problem = lq_problem(LqCoefficients(h1=2.0, h3=1.0, phi=2.0), terminal=constant_terminal(1.0))
    cost, _ = cost_of(problem, 0.0, _paths())
    assert cost.value == pytest.approx(2.0, abs=1e-14)


def test_cost_mean_initial_term():
    problem = lq_problem(LqCoefficients(phib=2.0), terminal=constant_terminal(3.0))
    cost, state = cost_of(problem, 0.0, _paths())
    assert cost.value == pytest.approx(9.0, abs=1e-13)
    assert evaluate_cost(problem, state).value == cost.value


# Variational equation ---------------------------------------------------------------

def test_zero_direction_gives_zero_variation():
    problem, paths = shipped_lq_problem(), _paths(6, 300)
    state = solve_mf_bdsde(problem, 0.2, paths)
    var = solve_variational(problem, state, 0.2, 0.0)
    assert np.array_equal(var.K, np.zeros_like(var.K)) and np.array_equal(var.L, np.zeros_like(var.L))


def test_control_drift_gives_linear_variation():
    problem = ProblemSpec(LinearTerm((0.0, 0.0, 1.0)), LinearTerm(), QuadraticTerm((0, 0, 1)),
                          QuadraticInitial(), constant_terminal(0.0))
    paths = _paths(8, 100)
    state = solve_mf_bdsde(problem, 0.0, paths)
    var = solve_variational(problem, state, 0.0, 1.0)
    expected = 1.0 - paths.grid.points
    assert np.allclose(var.K, expected[None, :], atol=1e-12)
    assert var.K[0, 0] == pytest.approx(1.0, abs=1e-12) and np.all(var.K[:, -1] == 0.0)


def test_variational_matches_tree_oracle():
    paths = tree_paths(build_grid(1.0, 3))
    problem = shipped_lq_problem()
    w = paths.w_values()[..., 0]
    state = solve_mf_bdsde(problem, 0.1 * w, paths, TREE)
    v = 0.4 - w + 0.2 * paths.b_tails()[..., 0]
    a = solve_variational(problem, state, 0.1 * w, v, config=TREE)
    b = solve_variational(problem, state, 0.1 * w, v, exact_tree=True)
    assert np.max(np.abs(a.K - b.K)) <= 1e-12 and np.max(np.abs(a.L - b.L)) <= 1e-12


# Gateaux derivative -----------------------------------------------------------------

def test_gateaux_pure_control_cost_is_one():
    problem = lq_problem(LqCoefficients(h3=1.0))
    paths = _paths()
    state = solve_mf_bdsde(problem, 1.0, paths)
    adj = solve_adjoint(problem, state, 1.0)
    res = gateaux_derivative(problem, state, adj, 1.0, 1.0)
    assert res.route1 == pytest.approx(1.0, abs=1e-12) and res.route2 == pytest.approx(1.0, abs=1e-12)


def _lq_setup(N=2000, n=10, seed=3):
    paths = _paths(n, N, seed)
    w = paths.w_values()[..., 0]
    tails = paths.b_tails()[..., 0]
    cfg = SolverConfig(picard_tol=1e-13)
    return shipped_lq_problem(), paths, 0.2 - 0.3 * w, 0.5 + 0.4 * w - 0.2 * tails, cfg


def test_routes_agree_within_standard_errors():
    problem, paths, u, v, cfg = _lq_setup()
    state = solve_mf_bdsde(problem, u, paths, cfg)
    adj = solve_adjoint(problem, state, u, config=cfg)
    res = gateaux_derivative(problem, state, adj, u, v, config=cfg)
    assert abs(res.gap) <= 3 * res.gap_standard_error + 1e-12


def test_route2_matches_central_difference():
    problem, paths, u, v, cfg = _lq_setup()
    eps = 1e-4
    state = solve_mf_bdsde(problem, u, paths, cfg)
    adj = solve_adjoint(problem, state, u, config=cfg)
    res = gateaux_derivative(problem, state, adj, u, v, config=cfg)
    up, _ = cost_of(problem, u + eps * v, paths, cfg)
    down, _ = cost_of(problem, u - eps * v, paths, cfg)
    fd = (up.value - down.value) / (2 * eps)
    assert abs(fd - res.route2) <= 1e-3 * abs(fd)


# Projection and residuals -------------------------------------------------------------

def test_project_examples():
    box = Box(-1.0, 2.0)
    assert project(np.array([0.5]), box)[0] == 0.5
    assert project(np.array([3.0]), box)[0] == 2.0


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(-10, 0), st.floats(0, 10))
def test_project_is_idempotent(values, lo, hi):
    box = Box(lo, hi)
    once = project(np.array(values), box)
    assert np.array_equal(project(once, box), once)
    assert np.all((once >= lo) & (once <= hi))


def test_box_residual_examples():
    box = Box(0.0, np.inf)
    u = np.array([[0.0, 0.0, 1.0]])
    grad = np.array([[5.0, 0.4, 0.3]])
    res = box_residual(grad, u, box)
    assert res[0, 1] == 0.0
    assert res[0, 2] == pytest.approx(0.3)
    assert res[0, 0] == 0.0


def test_lq_residual_vanishes_at_stationarity():
    # with f = g = 0 the state ignores u, and grad = h3 u vanishes at u = 0
    problem = lq_problem(LqCoefficients(h1=1.0, h3=2.0, phi=1.0), terminal=constant_terminal(1.0))
    paths = _paths()
    state = solve_mf_bdsde(problem, 0.0, paths)
    adj = solve_adjoint(problem, state, 0.0)
    assert np.max(smp_residual(problem, state, adj, 0.0)) == 0.0


# Optimizer --------------------------------------------------------------------------

def test_optimizer_finds_unconstrained_target():
    c = 0.7
    result = optimize(tracking_problem(c), 0.0, _paths(), OptimizerConfig(tol=1e-8))
    assert result.report.termination == "converged"
    assert np.allclose(result.u[:, 1:], c, atol=1e-8)
    assert result.cost.value == pytest.approx(0.0, abs=1e-12)


def test_optimizer_stops_on_the_boundary():
    c = 0.7
    problem = tracking_problem(c, Box(c + 1.0, np.inf))
    result = optimize(problem, c + 3.0, _paths(), OptimizerConfig(tol=1e-8))
    assert result.report.termination == "converged"
    assert np.allclose(result.u[:, 1:], c + 1.0, atol=1e-12)
    assert np.all(result.adjoint.gradient[:, 1:] > 0)


def test_optimizer_cost_history_is_non_increasing():
    paths = _paths(10, 500, seed=2)
    result = optimize(shipped_lq_problem(), 0.0, paths, OptimizerConfig(tol=1e-4))
    costs = result.report.costs
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert result.report.termination == "converged"
    assert result.report.residuals[-1] < 1e-4


def test_optimizer_reports_max_iterations():
    result = optimize(tracking_problem(0.7), 0.0, _paths(), OptimizerConfig(tol=0.0, max_iters=2))
    assert result.report.termination == "max-iterations"
    assert len(result.report.costs) == 3


def test_scalar_interaction_optimum_has_small_residual():
    problem = scalar_interaction_problem(Box(-1.0, 1.0))
    result = optimize(problem, 0.0, _paths(8, 400, seed=1), OptimizerConfig(tol=1e-3))
    assert result.report.termination == "converged"
    assert result.u.min() >= -1.0 and result.u.max() <= 1.0


# Sufficiency --------------------------------------------------------------------------

def test_convexity_probe_passes_on_lq():
    assert convexity_probe(shipped_lq_problem())[0]


def test_convexity_probe_fails_for_concave_cost():
    h = ScalarTerm(lambda t, y, z, u, r: -u**2, lambda t, y, z, u, r: (0 * u, 0 * u, -2 * u, 0 * u))
    problem = ProblemSpec(LinearTerm(), LinearTerm(), h, QuadraticInitial(), constant_terminal(0.0))
    passed, worst = convexity_probe(problem)
    assert not passed and worst < 0


def test_sufficiency_at_the_optimizer_candidate():
    paths = _paths(8, 400, seed=7)
    problem = shipped_lq_problem()
    result = optimize(problem, 0.0, paths, OptimizerConfig(tol=1e-5))
    report = verify_sufficiency(problem, result.u, paths, m=20)
    assert report.passed and report.dominance_violations == 0 and len(report.trials) == 20


def test_sufficiency_rejects_inadmissible_candidate():
    problem = tracking_problem(0.0, Box(0.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        verify_sufficiency(problem, 2.0, _paths(), m=1)


def test_variational_quotient_converges_on_nonlinear_problem():
    problem = scalar_interaction_problem(Box())
    paths = _paths(8, 400, seed=4)
    w = paths.w_values()[..., 0]
    cfg = SolverConfig(picard_tol=1e-14, max_picard=100)
    state = solve_mf_bdsde(problem, 0.2 * w, paths, cfg)
    errs = variational_convergence(problem, state, 0.2 * w, 1.0 + w, (0.1, 0.05, 0.025), cfg)
    assert errs[0] > errs[1] > errs[2]
