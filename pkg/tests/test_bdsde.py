import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfbdsde.bdsde import (RegressionConfig, SolverConfig, backward_residuals, coefficient_paths, cond_expect,
                           mean_residual_score, residual_check, solve_mf_bdsde, solve_on_tree)
from mfbdsde.drivers import build_grid, sample_paths, tree_paths
from mfbdsde.errors import InvalidArgumentError, NumericalError
from mfbdsde.identities import product_identity, square_identity, square_identity_sums, within
from mfbdsde.instances import mean_field_linear_problem, scalar_interaction_problem, shipped_lq_problem
from mfbdsde.law import LinearTerm, QuadraticInitial, QuadraticTerm
from mfbdsde.parallel import set_default_threads
from mfbdsde.problems import Box, ProblemSpec, affine_terminal, constant_terminal

TREE = SolverConfig(RegressionConfig(mode="tree-exact"), picard_tol=1e-15, max_picard=200)


def state_problem(drift=None, diffusion=None, terminal=None):
    return ProblemSpec(drift or LinearTerm(), diffusion or LinearTerm(), QuadraticTerm(), QuadraticInitial(),
                       terminal or constant_terminal(0.0))


def martingale_problem():
    return state_problem(terminal=affine_terminal(0.0, 1.0))


def backward_noise_problem(c=0.7, k=2.0):
    return state_problem(diffusion=LinearTerm(offset=c), terminal=constant_terminal(k))


# Conditional expectation -------------------------------------------------------------

def test_cond_expect_keeps_features():
    paths = sample_paths(build_grid(1.0, 4), 500, seed=1)
    w2 = paths.w_values()[:, 2, 0]
    assert np.allclose(cond_expect(w2, paths, 2), w2, atol=1e-8)


def test_cond_expect_tree_root_symmetry():
    paths = tree_paths(build_grid(1.0, 1))
    target = np.sign(paths.w_increments[:, 0, 0])
    out = cond_expect(target, paths, 0, RegressionConfig(mode="tree-exact"))
    assert np.array_equal(out, np.zeros(4))


def test_cond_expect_gaussian_projection():
    N = 20_000
    paths = sample_paths(build_grid(1.0, 4), N, seed=3)
    w = paths.w_values()[..., 0]
    est = cond_expect(w[:, 4], paths, 1, RegressionConfig(degree=1))
    err = (est - w[:, 1]) ** 2
    # least squares with K = 3 features leaves estimation error of order K * Var / N
    assert err.mean() <= 3 * 3 * (1.0 - 0.25) / N
    assert within(est - w[:, 4], 0.0)[0]


def test_cond_expect_rank_deficient_without_ridge():
    paths = sample_paths(build_grid(1.0, 2), 3, seed=0)
    with pytest.raises(NumericalError, match="ridge"):
        cond_expect(np.arange(3.0), paths, 1, RegressionConfig(degree=2, ridge=0.0))


def test_cond_expect_rejects_bad_inputs():
    paths = sample_paths(build_grid(1.0, 2), 10, seed=0)
    with pytest.raises(InvalidArgumentError):
        cond_expect(np.full(10, np.nan), paths, 0)
    with pytest.raises(InvalidArgumentError):
        cond_expect(np.zeros(10), paths, 2)
    with pytest.raises(InvalidArgumentError):
        cond_expect(np.zeros(10), paths, 0, RegressionConfig(mode="tree-exact"))


def test_regression_config_validation():
    with pytest.raises(InvalidArgumentError):
        RegressionConfig(degree=-1)
    with pytest.raises(InvalidArgumentError):
        RegressionConfig(ridge=-1.0)
    with pytest.raises(InvalidArgumentError):
        RegressionConfig(mode="neural")


# Solver examples ---------------------------------------------------------------------

def test_martingale_tree_exact():
    paths = tree_paths(build_grid(1.0, 2))
    sol = solve_mf_bdsde(martingale_problem(), None, paths, TREE)
    assert np.allclose(sol.ys, paths.w_values()[..., 0], atol=1e-14)
    assert np.allclose(sol.zs[:, :-1], 1.0, atol=1e-14)


def test_martingale_monte_carlo():
    paths = sample_paths(build_grid(1.0, 10), 4000, seed=2)
    sol = solve_mf_bdsde(martingale_problem(), None, paths)
    assert np.sqrt(np.mean((sol.ys - paths.w_values()[..., 0]) ** 2, axis=0)).max() <= 0.02
    assert np.sqrt(np.mean((sol.zs[:, :-1] - 1.0) ** 2, axis=0)).max() <= 0.05


@pytest.mark.parametrize("mode", ["tree", "montecarlo"])
def test_backward_noise_pathwise(mode):
    grid = build_grid(1.0, 3)
    paths = tree_paths(grid) if mode == "tree" else sample_paths(grid, 2000, seed=4)
    cfg = TREE if mode == "tree" else SolverConfig()
    sol = solve_mf_bdsde(backward_noise_problem(), None, paths, cfg)
    expected = 2.0 + 0.7 * paths.b_tails()[..., 0]
    assert np.max(np.abs(sol.ys - expected)) <= 1e-10
    assert np.sqrt(np.mean(sol.zs**2)) <= (1e-10 if mode == "tree" else 0.02)
    assert residual_check(sol, backward_noise_problem()).max() <= 1e-10


def test_mean_field_linear_two_step_value():
    paths = tree_paths(build_grid(1.0, 2))
    problem = mean_field_linear_problem()
    # explicit scheme on the deterministic mean equation: y_i = (1 + 1.5 dt) y_{i+1}
    for sol in (solve_mf_bdsde(problem, None, paths, TREE), solve_on_tree(problem, None, paths)):
        assert np.allclose(sol.ys[:, 0], 1.75**2, atol=1e-12)


def test_mean_field_linear_approaches_exponential():
    paths = sample_paths(build_grid(1.0, 200), 50, seed=0)
    y0 = solve_mf_bdsde(mean_field_linear_problem(), None, paths).ys[:, 0].mean()
    assert abs(y0 - np.exp(1.5)) / np.exp(1.5) <= 0.01


def test_tree_solver_constants():
    paths = tree_paths(build_grid(1.0, 3))
    sol = solve_on_tree(state_problem(terminal=constant_terminal(1.25)), None, paths)
    assert np.all(sol.ys == 1.25) and np.all(sol.zs == 0.0)


def test_tree_solver_matches_tree_exact_regression():
    paths = tree_paths(build_grid(1.0, 2))
    u = 0.2 + 0.4 * paths.w_values()[..., 0] - 0.3 * paths.b_tails()[..., 0]
    problem = shipped_lq_problem()
    a = solve_mf_bdsde(problem, u, paths, TREE)
    b = solve_on_tree(problem, u, paths, tol=1e-15)
    assert np.max(np.abs(a.ys - b.ys)) <= 1e-12 and np.max(np.abs(a.zs - b.zs)) <= 1e-12


def test_tree_solver_rejects_sampled_paths():
    with pytest.raises(InvalidArgumentError):
        solve_on_tree(martingale_problem(), None, sample_paths(build_grid(1.0, 2), 8, mode="bernoulli"))


# Residuals and diagnostics -----------------------------------------------------------

def test_residual_small_on_tree():
    paths = tree_paths(build_grid(1.0, 3))
    u = np.full((paths.particle_count, 4), 0.3)
    sol = solve_on_tree(shipped_lq_problem(), u, paths)
    assert residual_check(sol, shipped_lq_problem(), u=u).max() <= 1e-10


def test_residual_spike_on_corruption():
    paths = tree_paths(build_grid(1.0, 4))
    sol = solve_on_tree(backward_noise_problem(), None, paths)
    sol.y[:, 2] += 1.0
    resid = residual_check(sol, backward_noise_problem())
    assert np.argmax(resid) == 2 and resid[2] >= 0.5
    assert np.all(np.delete(resid, 2) <= 1e-10)


def test_mean_residual_score_is_statistically_small():
    paths = sample_paths(build_grid(1.0, 10), 2000, seed=8)
    u = np.full((2000, 11), 0.2)
    problem = shipped_lq_problem()
    sol = solve_mf_bdsde(problem, u, paths)
    f, g = coefficient_paths(problem, u, sol)
    assert mean_residual_score(backward_residuals(sol.y, sol.z, f, g, paths), 0) <= 3.0


@pytest.mark.parametrize("make", [shipped_lq_problem, scalar_interaction_problem, mean_field_linear_problem])
def test_picard_displacements_decrease(make):
    paths = sample_paths(build_grid(1.0, 10), 500, seed=6)
    u = None if make is mean_field_linear_problem else np.full((500, 11), 0.3)
    sol = solve_mf_bdsde(make(), u, paths)
    d = sol.displacements
    assert sol.status == "converged"
    assert all(b < a for a, b in zip(d[1:], d[2:]))


def test_picard_budget_reported():
    paths = sample_paths(build_grid(1.0, 5), 200, seed=6)
    sol = solve_mf_bdsde(mean_field_linear_problem(), None, paths, SolverConfig(picard_tol=1e-30, max_picard=2))
    assert sol.status == "max-iterations" and sol.iterations == 2


def test_terminal_bit_exact():
    paths = sample_paths(build_grid(1.0, 6), 300, seed=9)
    problem = shipped_lq_problem()
    sol = solve_mf_bdsde(problem, np.zeros((300, 7)), paths)
    assert np.array_equal(sol.ys[:, -1], problem.terminal_values(paths))


def test_single_particle_is_flagged():
    paths = sample_paths(build_grid(1.0, 3), 1, seed=0)
    sol = solve_mf_bdsde(mean_field_linear_problem(), None, paths)
    assert sol.diagnostics()["degenerate_ensemble"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_name_the_step():
    problem = state_problem(drift=LinearTerm((1e308, 0.0, 0.0)), terminal=constant_terminal(1e10))
    with pytest.raises(NumericalError, match="step"):
        solve_mf_bdsde(problem, None, sample_paths(build_grid(1.0, 3), 20, seed=0))


def test_control_shape_and_box_checked():
    paths = sample_paths(build_grid(1.0, 2), 5, seed=0)
    with pytest.raises(InvalidArgumentError):
        solve_mf_bdsde(shipped_lq_problem(), np.zeros((5, 2)), paths)
    with pytest.raises(InvalidArgumentError):
        solve_mf_bdsde(shipped_lq_problem(Box(0.0, 1.0)), np.full((5, 3), 2.0), paths)


def test_threads_do_not_change_results():
    paths = sample_paths(build_grid(1.0, 8), 600, seed=10)
    problem = scalar_interaction_problem()
    u = np.full((600, 9), 0.1)
    try:
        set_default_threads(1)
        a = solve_mf_bdsde(problem, u, paths)
        set_default_threads(4)
        b = solve_mf_bdsde(problem, u, paths)
    finally:
        set_default_threads(None)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.z, b.z)


# Stochastic calculus sign checks -----------------------------------------------------

def test_backward_quadrature_uses_right_endpoint():
    paths = sample_paths(build_grid(1.0, 10), 50_000, seed=12)
    b = paths.b_values()[..., 0]
    db = paths.b_increments[..., 0]
    right = np.sum(b[:, 1:] * db, axis=1)
    left = np.sum(b[:, :-1] * db, axis=1)
    assert within(right, 1.0)[0] and within(left, 0.0)[0]


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_square_identity_signs(theta, gamma):
    paths = sample_paths(build_grid(1.0, 5), 20_000, seed=13)
    sample, target = square_identity(paths, theta, gamma)
    if np.std(sample) == 0:
        assert sample.mean() == pytest.approx(target, abs=1e-12)
    else:
        assert within(sample, target, n_se=4.0)[0]


def test_square_identity_discrete_expansion():
    paths = sample_paths(build_grid(1.0, 8), 4, seed=14)
    lhs, fwd, back_right, _, qv = square_identity_sums(paths, 0.8, 0.6)
    # exact algebra: alpha_{i+1} - alpha_i = theta dW + gamma dB
    assert np.allclose(lhs, fwd + back_right + qv, atol=1e-12)


def test_product_identity_cross_term():
    paths = sample_paths(build_grid(1.0, 4), 40_000, seed=15)
    sample, target = product_identity(paths, a=0.5, b=-0.3, f=0.4, g=0.9, z=0.7, F=-0.2, G=1.1, q=0.6)
    assert within(sample, target)[0]
