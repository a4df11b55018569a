import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfbdsde.errors import CapacityError, InvalidArgumentError, UnsupportedOperationError
from mfbdsde.law import (EmpiricalLaw, Ensemble, InteractionSpec, KernelInitial, KernelTerm, LinearTerm,
                         QuadraticInitial, QuadraticTerm, ScalarTerm, coordinatewise_w2, identity_coupling_rms,
                         l_derivative, moments, pairwise_average, pairwise_mean, scalar_functional,
                         validate_coefficient_bounds, wasserstein2)
from mfbdsde.problems import LqCoefficients, lq_problem


def law_y(values):
    return EmpiricalLaw.from_fields(y=np.asarray(values, dtype=float))


def test_moments_examples():
    assert moments(law_y([1, -1]), "y")[0] == 0.0
    assert moments(law_y([0, 2, 4]), "y")[0] == 2.0
    assert moments(law_y([1, -1]), "y", order=2)[0, 0] == 1.0


def test_moments_rejects_empty_selection():
    with pytest.raises(InvalidArgumentError):
        moments(law_y([1.0]), [])


def test_w2_examples():
    a = law_y([0.3, -1.2, 4.0])
    assert wasserstein2(a, a) == 0.0
    assert wasserstein2(law_y([0]), law_y([1])) == 1.0
    assert wasserstein2(law_y([0, 2]), law_y([1, 3])) == pytest.approx(1.0, abs=1e-15)


def test_w2_rejects_mismatch():
    with pytest.raises(InvalidArgumentError):
        wasserstein2(law_y([0, 1]), law_y([0, 1, 2]))
    two = EmpiricalLaw.from_fields(y=np.zeros(2), z=np.zeros(2))
    with pytest.raises(InvalidArgumentError):
        wasserstein2(law_y([0, 1]), two)


def test_w2_assignment_cap():
    rng = np.random.default_rng(0)
    a = EmpiricalLaw.from_fields(y=rng.normal(size=65), z=rng.normal(size=65))
    with pytest.raises(CapacityError):
        wasserstein2(a, a)
    assert coordinatewise_w2(a, a)["label"] == "coordinatewise-lower-bound"


def _brute_w2(a, b):
    from itertools import permutations
    best = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1)) for p in permutations(range(len(a))))
    return np.sqrt(best)


small_laws = st.integers(1, 5).flatmap(
    lambda n: st.tuples(*(arrays(float, (n, 2), elements=st.floats(-10, 10)) for _ in range(3))))


@settings(max_examples=60, deadline=None)
@given(small_laws)
def test_w2_metric_properties(triple):
    a, b, c = (EmpiricalLaw.from_fields(y=x[:, 0], z=x[:, 1]) for x in triple)
    ab, ba = wasserstein2(a, b), wasserstein2(b, a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab <= wasserstein2(a, c) + wasserstein2(c, b) + 1e-9
    assert ab == pytest.approx(_brute_w2(triple[0], triple[1]), abs=1e-9)
    assert ab <= identity_coupling_rms(triple[0], triple[1]) + 1e-9


def test_scalar_functional_examples():
    law = law_y([1, -1])
    assert scalar_functional(law, lambda m: m.field("y")[:, 0] ** 2) == 1.0
    assert scalar_functional(law, lambda m: 3.5) == 3.5
    law = law_y([0, 2, 4])
    assert scalar_functional(law, lambda m: m.field("y")[:, 0]) == moments(law, "y")[0]


def test_pairwise_average_examples():
    law = law_y([1, 3])
    assert pairwise_average(law, lambda x, m: x * m.field("y")[:, 0], 2.0) == 4.0
    assert pairwise_average(law, lambda x, m: x**2 + 0 * m.field("y")[:, 0], 3.0) == 9.0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-5, 5))
def test_pairwise_average_separable(values, x):
    law = law_y(values)
    a, b = np.cos, np.exp
    lhs = pairwise_average(law, lambda x0, m: a(x0) * b(m.field("y")[:, 0]), x)
    rhs = a(x) * scalar_functional(law, lambda m: b(m.field("y")[:, 0]))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-5, 5))
def test_pairwise_average_ignoring_first_argument(values, x):
    law = law_y(values)
    fn = lambda m: np.sin(m.field("y")[:, 0])
    assert pairwise_average(law, lambda x0, m: fn(m), x) == pytest.approx(scalar_functional(law, fn), abs=1e-14)


def test_pairwise_mean_is_thread_independent():
    rng = np.random.default_rng(1)
    x = rng.normal(size=700)
    block = lambda rows: np.tanh(x[rows, None] - x[None, :])
    one = pairwise_mean(block, 700, 700, threads=1)
    four = pairwise_mean(block, 700, 700, threads=4)
    assert np.array_equal(one, four)
    assert np.allclose(one, np.tanh(x[:, None] - x[None, :]).mean(axis=1), atol=1e-14)


def _ens(y, z=None, u=None):
    y = np.asarray(y, dtype=float)
    fill = lambda v: np.zeros_like(y) if v is None else np.asarray(v, dtype=float)
    return Ensemble(y, fill(z), fill(u))


def test_scalar_l_derivative_example():
    term = ScalarTerm(lambda t, y, z, u, r: r + 0 * y, lambda t, y, z, u, r: (0.0, 0.0, 0.0, 1.0),
                      lambda y, z, u: y**2, lambda y, z, u: (2 * y, 0 * y, 0 * y))
    spec = InteractionSpec({"f": term})
    d = l_derivative(spec, "y", (0.0, 0.0, 0.0), _ens([1.0, 2.0]), (3.0, 0.0, 0.0))
    assert d[0, 0] == 6.0


def test_first_order_l_derivative_example():
    term = KernelTerm(lambda t, y, z, u, y2, z2, u2: y2**2 + 0 * y,
                      lambda t, y, z, u, y2, z2, u2: (0 * y, 0 * y, 0 * y, 2 * y2, 0 * y2, 0 * y2))
    spec = InteractionSpec({"f": term})
    d = l_derivative(spec, "y", (0.0, 0.0, 0.0), _ens([1.0, 2.0]), (3.0, 0.0, 0.0))
    assert d[0, 0] == 6.0


def test_linear_l_derivative_is_constant():
    spec = InteractionSpec({"f": LinearTerm((1.0, 0.0, 0.0), (0.7, 0.0, 0.0))})
    rng = np.random.default_rng(2)
    base = tuple(rng.normal(size=4) for _ in range(3))
    point = tuple(rng.normal(size=5) for _ in range(3))
    d = l_derivative(spec, "y", base, _ens(rng.normal(size=6)), point)
    assert d.shape == (4, 5) and np.all(d == 0.7)


def test_l_derivative_unsupported_without_law():
    spec = InteractionSpec({"f": LinearTerm((1.0, 0.0, 0.0))})
    with pytest.raises(UnsupportedOperationError):
        l_derivative(spec, "y", (0.0, 0.0, 0.0), _ens([1.0]), (0.0, 0.0, 0.0))


def _smooth_scalar():
    return ScalarTerm(lambda t, y, z, u, r: np.sin(r) * y + r**2,
                      lambda t, y, z, u, r: (np.sin(r) + 0 * y, 0 * y, 0 * y, np.cos(r) * y + 2 * r),
                      lambda y, z, u: y**2 + 0.5 * z, lambda y, z, u: (2 * y, 0.5 + 0 * z, 0 * u))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["y", "z"]))
def test_scalar_l_derivative_matches_lift(seed, which):
    rng = np.random.default_rng(seed)
    N, h = 7, 1e-6
    ens = _ens(rng.normal(size=N), rng.normal(size=N))
    term = _smooth_scalar()
    base = (np.array([0.4]), np.array([0.1]), np.array([0.0]))
    j = int(rng.integers(N))
    moved = {"y": ens.y.copy(), "z": ens.z.copy()}
    moved[which][j] += h
    ens2 = Ensemble(moved["y"], moved["z"], ens.u)
    fd = (term.value(0.0, *base, ens2) - term.value(0.0, *base, ens))[0] / (h / N)
    exact = l_derivative(InteractionSpec({"f": term}), which, base, ens,
                         (ens.y[j:j + 1], ens.z[j:j + 1], ens.u[j:j + 1]))[0, 0]
    assert fd == pytest.approx(exact, rel=1e-4, abs=1e-4)


def test_initial_cost_gradients():
    y0 = np.array([1.0, 2.0, 6.0])
    quad = QuadraticInitial(2.0, 1.0)
    assert np.allclose(quad.total_gradient(y0), 2 * y0 + 3.0)
    kern = KernelInitial(lambda a, b: (a - b) ** 2, lambda a, b: (2 * (a - b), -2 * (a - b)))
    # d/dy_i of (1/N^2) sum_jk (y_j - y_k)^2 scaled by N equals 4 (y_i - mean)
    assert np.allclose(kern.total_gradient(y0), 4 * (y0 - y0.mean()))


def test_validator_examples():
    probe = _ens(np.linspace(-2, 2, 9), np.linspace(-3, 3, 9), np.linspace(-1, 1, 9))
    half = validate_coefficient_bounds(InteractionSpec({"g": LinearTerm((0.0, 0.5, 0.0))}), probe)
    assert half.alpha1 == 0.5 and half.passed
    one = validate_coefficient_bounds(InteractionSpec({"g": LinearTerm((0.0, 1.0, 0.0))}), probe)
    assert one.alpha1 == 1.0 and not one.passed
    assert any(m.startswith("H1") for m in one.messages)
    lq = lq_problem(LqCoefficients(g2=0.3, gb2=0.3))
    bounds = validate_coefficient_bounds(lq.interaction, probe)
    assert bounds.passed and bounds.alpha2 == pytest.approx(0.09)


def test_validator_second_moment_failure():
    probe = _ens(np.linspace(-2, 2, 9), np.linspace(-3, 3, 9))
    spec = InteractionSpec({"g": LinearTerm((0.0, 0.6, 0.0), (0.0, 0.7, 0.0))})
    bounds = validate_coefficient_bounds(spec, probe)
    assert not bounds.passed and any(m.startswith("H2") for m in bounds.messages)


def test_quadratic_term_value():
    ens = _ens([1.0, 3.0], [0.0, 0.0], [2.0, 2.0])
    term = QuadraticTerm((2.0, 0.0, 1.0), (4.0, 0.0, 0.0))
    # (1/2)(2 y^2 + u^2 + 4 E[y]^2) with E[y] = 2
    assert np.allclose(term.value(0.0, ens.y, ens.z, ens.u, ens), [0.5 * (2 + 4 + 16), 0.5 * (18 + 4 + 16)])
