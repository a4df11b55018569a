import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfbdsde.adjoint import (adjoint_initial, adjoint_on_tree, adjoint_residual, hamiltonian, reverse_time_transform,
                             solve_adjoint)
from mfbdsde.bdsde import RegressionConfig, SolverConfig, solve_mf_bdsde
from mfbdsde.control import gateaux_derivative, solve_variational
from mfbdsde.drivers import build_grid, sample_paths, tree_paths
from mfbdsde.errors import InvalidArgumentError
from mfbdsde.instances import SHIPPED_LQ, first_order_problem, scalar_interaction_problem, shipped_lq_problem
from mfbdsde.law import Ensemble
from mfbdsde.problems import Box, LqCoefficients, constant_terminal, lq_problem

TREE = SolverConfig(RegressionConfig(mode="tree-exact"), picard_tol=1e-15, max_picard=200)


def test_hamiltonian_pure_control_cost():
    problem = lq_problem(LqCoefficients(h3=2.0))
    ev = hamiltonian(problem, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0)
    assert ev.value[0] == 9.0


def test_hamiltonian_drift_pairing():
    problem = lq_problem(LqCoefficients(f1=2.0, h1=4.0))
    ev = hamiltonian(problem, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0)
    assert ev.value[0] == 4.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_hamiltonian_p_partial_is_drift(seed):
    rng = np.random.default_rng(seed)
    problem = shipped_lq_problem()
    y, z, u, p, q = rng.normal(size=(5, 6))
    ev = hamiltonian(problem, 0.3, y, z, u, p, q)
    h = 1e-6
    up = hamiltonian(problem, 0.3, y, z, u, p + h, q).value
    down = hamiltonian(problem, 0.3, y, z, u, p - h, q).value
    assert np.allclose((up - down) / (2 * h), ev.dp, rtol=1e-6, atol=1e-6)
    assert np.allclose(ev.dq, problem.diffusion.value(0.3, y, z, u, Ensemble(y, z, u)), atol=1e-12)


def test_adjoint_initial_examples():
    y0 = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(adjoint_initial(lq_problem(LqCoefficients(phi=1.0)), y0), y0)
    assert np.allclose(adjoint_initial(lq_problem(LqCoefficients(phi=2.0)), np.array([3.0])), 6.0)
    mean_only = lq_problem(LqCoefficients(phib=1.0))
    assert np.allclose(adjoint_initial(mean_only, np.array([4.0, 6.0])), 5.0)


def _frozen_state(coeffs, paths, cfg=None):
    # zero drift and diffusion keep the state at the constant terminal value
    problem = lq_problem(coeffs, terminal=constant_terminal(1.0))
    state = solve_mf_bdsde(problem, 0.0, paths, cfg)
    return problem, solve_adjoint(problem, state, 0.0, config=cfg)


def test_constant_datum_is_preserved_on_tree():
    _, adj = _frozen_state(LqCoefficients(phi=2.0), tree_paths(build_grid(1.0, 3)), TREE)
    assert np.max(np.abs(adj.p - 2.0)) <= 1e-12
    assert np.max(np.abs(adj.q)) <= 1e-12


def test_constant_datum_in_mean_and_shrinking_noise():
    # the transposed regression keeps ensemble means exactly; particles carry sampling noise
    rms = []
    for N in (500, 20_000):
        _, adj = _frozen_state(LqCoefficients(phi=2.0), sample_paths(build_grid(1.0, 4), N, seed=4))
        assert np.allclose(adj.p.mean(axis=0), 2.0, atol=1e-12)
        rms.append(np.sqrt(np.mean((adj.p - 2.0) ** 2)))
    assert rms[1] < 0.5 * rms[0]


def test_constant_y_partial_gives_linear_growth():
    a = 0.8
    paths = tree_paths(build_grid(1.0, 3))
    _, adj = _frozen_state(LqCoefficients(phi=1.0, h1=a), paths, TREE)
    assert np.max(np.abs(adj.p - (1.0 + a * paths.grid.points)[None, :])) <= 1e-12
    paths = sample_paths(build_grid(1.0, 4), 500, seed=4)
    _, adj = _frozen_state(LqCoefficients(phi=1.0, h1=a), paths)
    assert np.allclose(adj.p.mean(axis=0), 1.0 + a * paths.grid.points, atol=1e-12)


def test_adjoint_matches_tree_oracle():
    paths = tree_paths(build_grid(1.0, 3))
    problem = shipped_lq_problem()
    w = paths.w_values()[..., 0]
    u = 0.2 - 0.4 * w
    state = solve_mf_bdsde(problem, u, paths, TREE)
    a, b = solve_adjoint(problem, state, u, config=TREE), adjoint_on_tree(problem, state, u)
    for x, y in ((a.p, b.p), (a.q, b.q), (a.gradient, b.gradient)):
        assert np.max(np.abs(x - y)) <= 1e-12


def test_adjoint_pathwise_identity_on_tree():
    paths = tree_paths(build_grid(1.0, 3))
    problem = shipped_lq_problem()
    state = solve_mf_bdsde(problem, 0.1, paths, TREE)
    adj = solve_adjoint(problem, state, 0.1, config=TREE)
    assert np.max(adjoint_residual(adj, paths)) <= 1e-12


def test_adjoint_requires_shared_ensemble():
    problem = shipped_lq_problem()
    paths = sample_paths(build_grid(1.0, 2), 50, seed=0)
    state = solve_mf_bdsde(problem, 0.0, paths)
    other = sample_paths(build_grid(1.0, 2), 50, seed=0)
    with pytest.raises(InvalidArgumentError):
        solve_adjoint(problem, state, 0.0, paths=other)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_reverse_time_is_an_involution(seed, n):
    paths = sample_paths(build_grid(1.0, n), 7, seed=seed)
    grid_arr = np.random.default_rng(seed).normal(size=(7, n + 1))
    step_arr = np.random.default_rng(seed + 1).normal(size=(7, n))
    once = reverse_time_transform(paths, grid_arr, step_arr)
    twice = reverse_time_transform(*once)
    assert np.array_equal(twice[1], grid_arr) and np.array_equal(twice[2], step_arr)
    assert np.array_equal(twice[0].w_increments, paths.w_increments)
    assert np.array_equal(twice[0].b_increments, paths.b_increments)


def test_reverse_time_swaps_driver_roles_on_one_step():
    paths = sample_paths(build_grid(1.0, 1), 3, seed=2)
    rev = reverse_time_transform(paths)[0]
    assert np.array_equal(rev.w_increments, paths.b_increments)
    assert np.array_equal(rev.b_increments, paths.w_increments)


def test_reverse_time_rejects_misshaped_arrays():
    paths = sample_paths(build_grid(1.0, 3), 4, seed=0)
    with pytest.raises(InvalidArgumentError):
        reverse_time_transform(paths, np.zeros((4, 7)))


def _duality_gap(problem, paths, u, v, config=None):
    state = solve_mf_bdsde(problem, u, paths, config)
    adj = solve_adjoint(problem, state, u, config=config)
    var = solve_variational(problem, state, u, v, config=config)
    return gateaux_derivative(problem, state, adj, u, v, var)


@pytest.mark.parametrize("mode", ["tree", "montecarlo"])
def test_adjoint_is_the_discrete_dual(mode):
    if mode == "tree":
        paths, cfg = tree_paths(build_grid(1.0, 3)), TREE
    else:
        paths, cfg = sample_paths(build_grid(1.0, 10), 2000, seed=8), SolverConfig(picard_tol=1e-13)
    w = paths.w_values()[..., 0]
    tails = paths.b_tails()[..., 0]
    u, v = 0.3 * w, 0.5 - 0.2 * w + 0.1 * tails
    res = _duality_gap(shipped_lq_problem(), paths, u, v, cfg)
    assert abs(res.route1 - res.route2) <= 1e-9 * max(1.0, abs(res.route1))


def test_scalar_interaction_duality():
    paths = sample_paths(build_grid(1.0, 8), 800, seed=5)
    problem = scalar_interaction_problem(Box())
    w = paths.w_values()[..., 0]
    res = _duality_gap(problem, paths, 0.2 * w, 1.0 + 0 * w, SolverConfig(picard_tol=1e-13))
    assert abs(res.route1 - res.route2) <= 1e-7 * max(1.0, abs(res.route1))


def test_first_order_duality():
    paths = sample_paths(build_grid(1.0, 4), 120, seed=6)
    problem = first_order_problem(Box())
    w = paths.w_values()[..., 0]
    res = _duality_gap(problem, paths, 0.1 * w, 0.5 + w, SolverConfig(picard_tol=1e-13))
    assert abs(res.route1 - res.route2) <= 1e-7 * max(1.0, abs(res.route1))


def test_shipped_lq_is_valid():
    assert SHIPPED_LQ.violations() == []
