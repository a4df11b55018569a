import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfbdsde.drivers import (backward_increment_tail, build_grid, enumerate_tree, node_keys, paths_to_csv, sample_paths,
                             tree_paths)
from mfbdsde.errors import CapacityError, InvalidArgumentError


def test_grid_four_steps():
    grid = build_grid(1.0, 4)
    assert grid.points.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert grid.dt == 0.25


def test_grid_single_step():
    assert build_grid(2.0, 1).points.tolist() == [0.0, 2.0]


@pytest.mark.parametrize("T,n", [(1.0, 0), (0.0, 3), (-1.0, 2)])
def test_grid_rejects_bad_arguments(T, n):
    with pytest.raises(InvalidArgumentError):
        build_grid(T, n)


@given(st.floats(0.01, 100.0), st.integers(1, 500))
def test_grid_invariants(T, n):
    grid = build_grid(T, n)
    assert grid.points.shape == (n + 1,)
    assert grid.points[0] == 0.0 and grid.points[-1] == T
    assert np.allclose(np.diff(grid.points), grid.dt, rtol=1e-12, atol=1e-14 * T)


def test_same_seed_same_increments():
    grid = build_grid(1.0, 5)
    a = sample_paths(grid, 50, (2, 1), seed=7)
    b = sample_paths(grid, 50, (2, 1), seed=7)
    assert np.array_equal(a.w_increments, b.w_increments)
    assert np.array_equal(a.b_increments, b.b_increments)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40), st.integers(1, 4))
def test_particles_do_not_depend_on_count_or_threads(seed, N, threads):
    grid = build_grid(1.0, 3)
    small = sample_paths(grid, N, seed=seed, threads=1)
    big = sample_paths(grid, N + 300, seed=seed, threads=threads)
    assert np.array_equal(small.w_increments, big.w_increments[:N])
    assert np.array_equal(small.b_increments, big.b_increments[:N])


def test_terminal_w_is_sum_of_increments():
    paths = sample_paths(build_grid(1.0, 6), 20, seed=3)
    assert np.allclose(paths.w_values()[:, -1], paths.w_increments.sum(axis=1), atol=1e-15)
    assert np.all(paths.w_values()[:, 0] == 0) and np.all(paths.b_values()[:, 0] == 0)


def test_gaussian_variance_unit_step():
    paths = sample_paths(build_grid(1.0, 1), 100_000, seed=11)
    x = paths.w_increments[:, 0, 0]
    var = x.var(ddof=1)
    # standard error of the sample variance of a unit normal is sqrt(2 / (N - 1))
    assert abs(var - 1.0) <= 3 * np.sqrt(2 / (x.size - 1))


def test_w_and_b_uncorrelated():
    paths = sample_paths(build_grid(1.0, 2), 100_000, seed=5)
    w, b = paths.w_increments[:, 0, 0], paths.b_increments[:, 0, 0]
    corr = np.corrcoef(w, b)[0, 1]
    assert abs(corr) <= 3 / np.sqrt(w.size)


def test_bernoulli_increments_are_signs():
    grid = build_grid(1.0, 4)
    paths = sample_paths(grid, 100, seed=1, mode="bernoulli")
    assert np.allclose(np.abs(paths.w_increments), np.sqrt(grid.dt))
    assert np.allclose(np.abs(paths.b_increments), np.sqrt(grid.dt))


def test_tree_moments_match_gaussian_exactly():
    grid = build_grid(1.0, 3)
    paths = tree_paths(grid)
    for arr in (paths.w_increments, paths.b_increments):
        assert np.allclose(arr.mean(axis=0), 0.0, atol=1e-15)
        assert np.allclose((arr**2).mean(axis=0), grid.dt, rtol=1e-14)


def test_tail_at_last_step_is_zero():
    paths = sample_paths(build_grid(1.0, 3), 4, seed=2)
    assert np.array_equal(backward_increment_tail(paths, 1, 3), np.zeros(1))


def test_tail_at_first_step_is_terminal_b():
    paths = sample_paths(build_grid(1.0, 3), 4, seed=2)
    assert np.allclose(backward_increment_tail(paths, 2, 0), paths.b_values()[2, -1], atol=1e-15)


def test_tail_on_two_steps_is_last_increment():
    paths = sample_paths(build_grid(1.0, 2), 4, seed=2)
    assert np.array_equal(backward_increment_tail(paths, 0, 1), paths.b_increments[0, 1])


def test_tail_rejects_bad_step():
    paths = sample_paths(build_grid(1.0, 2), 4, seed=2)
    with pytest.raises(InvalidArgumentError):
        backward_increment_tail(paths, 0, 3)


def test_tails_agree_with_per_particle_helper():
    paths = sample_paths(build_grid(1.0, 4), 5, seed=9)
    tails = paths.b_tails()
    for j in range(5):
        for i in range(5):
            assert np.allclose(tails[j, i], backward_increment_tail(paths, j, i), atol=1e-15)


@pytest.mark.parametrize("n,leaves", [(1, 4), (2, 16)])
def test_tree_leaf_counts(n, leaves):
    nodes = enumerate_tree(build_grid(1.0, n))
    assert len(nodes) == leaves
    assert all(node.weight == Fraction(1, leaves) for node in nodes)
    assert sum(node.weight for node in nodes) == 1


def test_tree_cap_enforced():
    with pytest.raises(CapacityError):
        enumerate_tree(build_grid(1.0, 11))
    with pytest.raises(CapacityError):
        sample_paths(build_grid(1.0, 11), None, mode="bernoulli-tree")


def test_node_keys_encode_filtration():
    paths = tree_paths(build_grid(1.0, 2))
    # at the root only the B signs are known: 4 nodes of 4 leaves each
    keys = node_keys(paths, 0)
    assert len(np.unique(keys)) == 4
    assert all(np.sum(keys == k) == 4 for k in np.unique(keys))
    assert len(np.unique(node_keys(paths, 2))) == 4


def test_paths_csv_schema(tmp_path):
    paths = sample_paths(build_grid(1.0, 2), 3, seed=0)
    target = paths_to_csv(paths, tmp_path / "paths.csv")
    rows = list(csv.reader(target.open()))
    assert rows[0] == ["particle", "step", "driver", "coordinate", "increment"]
    assert len(rows) == 1 + 2 * 3 * 2
    assert {len(r) for r in rows} == {5}
    assert float(rows[1][4]) == paths.w_increments[0, 0, 0]
