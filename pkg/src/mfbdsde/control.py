"""Cost, Gateaux derivatives, projected-gradient optimization and SMP checks.

The running cost is integrated with the right-endpoint rule
``J = E[Phi(y_0)] + dt * sum_{i=1..n} E[h(theta_i)]``, matching the grid
points at which the scheme evaluates its coefficients. With this choice the
adjoint gradient is the exact derivative of the discrete cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointSolution, hamiltonian, solve_adjoint
from .bdsde import EnsembleSolution, SolverConfig, check_control, solve_mf_bdsde, solve_on_tree
from .drivers import DriverPaths
from .errors import InvalidArgumentError
from .law import Ensemble
from .problems import Box, ProblemSpec


@dataclass
class CostEstimate:
    """Ensemble estimate of the cost with its Monte Carlo standard error."""

    value: float
    standard_error: float
    per_particle: np.ndarray = field(repr=False)


def _slice(state: EnsembleSolution, u: np.ndarray, i: int):
    y, z, uu = state.ys[:, i], state.zs[:, i], u[:, i]
    return state.paths.grid.points[i], y, z, uu, Ensemble(y, z, uu)


def evaluate_cost(problem: ProblemSpec, state: EnsembleSolution, u=None) -> CostEstimate:
    """Cost of a solved state; ``u`` defaults to the control stored in ``state``."""
    u = check_control(u if u is not None else state.u, *_shape(state))
    dt = state.paths.grid.dt
    per = np.asarray(problem.initial_cost.value(state.ys[:, 0]), dtype=float).copy()
    for i in range(1, state.ys.shape[1]):
        per += dt * problem.running_cost.value(*_slice(state, u, i))
    return CostEstimate(float(per.mean()), _se(per), per)


def _shape(state: EnsembleSolution):
    return state.ys.shape[0], state.ys.shape[1] - 1


def _se(values: np.ndarray) -> float:
    n = values.shape[0]
    return float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def cost_of(problem: ProblemSpec, u, paths: DriverPaths, config: SolverConfig | None = None,
            bank=None) -> tuple[CostEstimate, EnsembleSolution]:
    """Solve the state for ``u`` and evaluate the cost."""
    state = solve_mf_bdsde(problem, u, paths, config, bank=bank)
    return evaluate_cost(problem, state, u), state


# Variational equation -----------------------------------------------------------

class LinearizedCoefficients:
    """Coefficients of the variational equation along a state solution.

    The drift is ``f_y K + f_z L + f_u v`` plus the mean-field tangent
    ``E~[d_mu f(theta)(theta~) (K~, L~, v~)]``, and likewise for the diffusion.
    """

    def __init__(self, problem: ProblemSpec, state: EnsembleSolution, u, v):
        self.problem, self.state = problem, state
        N, n = _shape(state)
        self.u = check_control(u if u is not None else state.u, N, n)
        self.v = check_control(v, N, n)
        self.law_dependent = problem.state_law_dependent

    def terminal(self, paths):
        return np.zeros((paths.particle_count, 1))

    def _linear(self, term, i, K, L, frozen_K, frozen_L, rows):
        t = self.state.paths.grid.points[i]
        y, z, u = self.state.ys[rows, i], self.state.zs[rows, i], self.u[rows, i]
        v = self.v[rows, i]
        ens = Ensemble(y, z, u)
        gy, gz, gu = term.grad(t, y, z, u, ens)
        out = gy * K[:, 0] + gz * L[:, 0, 0] + gu * v
        if term.law_dependent:
            out = out + term.mf_tangent(t, ens, frozen_K[:, 0], frozen_L[:, 0, 0], v)
        return out

    def drift(self, i, K, L, frozen_K, frozen_L, rows):
        return self._linear(self.problem.drift, i, K, L, frozen_K, frozen_L, rows)[:, None]

    def diffusion(self, i, K, L, frozen_K, frozen_L, rows):
        return self._linear(self.problem.diffusion, i, K, L, frozen_K, frozen_L, rows)[:, None, None]


@dataclass
class VariationalSolution:
    """Directional derivative ``(K, L)`` of the state, each ``(N, n+1)``; ``K_n = 0``."""

    K: np.ndarray
    L: np.ndarray
    status: str = "converged"


def solve_variational(problem: ProblemSpec, state: EnsembleSolution, u, v,
                      paths: DriverPaths | None = None, config: SolverConfig | None = None,
                      exact_tree: bool = False) -> VariationalSolution:
    """Solve the linear variational equation with the state solver (or the tree solver)."""
    paths = paths or state.paths
    coeffs = LinearizedCoefficients(problem, state, u, v)
    if exact_tree:
        sol = solve_on_tree(coeffs, None, paths)
    else:
        sol = solve_mf_bdsde(coeffs, None, paths, config, bank=state.bank)
    return VariationalSolution(sol.ys, sol.zs, sol.status)


# Gateaux derivative -------------------------------------------------------------

@dataclass
class GateauxResult:
    """Directional derivative of the cost by the variational and adjoint routes."""

    route1: float
    route2: float
    gap: float
    gap_standard_error: float
    route1_per_particle: np.ndarray = field(repr=False)
    route2_per_particle: np.ndarray = field(repr=False)


def route2_per_particle(adjoint: AdjointSolution, v, dt: float) -> np.ndarray:
    """``sum_{i>=1} dt * grad_i * v_i`` per particle."""
    v = np.asarray(v, dtype=float)
    return dt * np.sum(adjoint.gradient[:, 1:] * np.broadcast_to(v, adjoint.gradient.shape)[:, 1:], axis=1)


def route1_per_particle(problem: ProblemSpec, state: EnsembleSolution, u, v,
                        var: VariationalSolution) -> np.ndarray:
    """Cost derivative through ``(K, L)``: running-cost tangent plus the initial-cost term."""
    N, n = _shape(state)
    u, v = check_control(u if u is not None else state.u, N, n), check_control(v, N, n)
    dt = state.paths.grid.dt
    h = problem.running_cost
    out = problem.initial_cost.total_gradient(state.ys[:, 0]) * var.K[:, 0]
    for i in range(1, n + 1):
        t, y, z, uu, ens = _slice(state, u, i)
        gy, gz, gu = h.grad(t, y, z, uu, ens)
        term = gy * var.K[:, i] + gz * var.L[:, i] + gu * v[:, i]
        if h.law_dependent:
            term = term + h.mf_tangent(t, ens, var.K[:, i], var.L[:, i], v[:, i])
        out = out + dt * term
    return out


def gateaux_derivative(problem: ProblemSpec, state: EnsembleSolution, adjoint: AdjointSolution, u, v,
                       variational: VariationalSolution | None = None,
                       config: SolverConfig | None = None) -> GateauxResult:
    """Directional derivative of ``J`` at ``u`` along ``v`` by both routes.

    Route 1 solves the variational equation; route 2 pairs the adjoint
    gradient with ``v`` and is the one used by the optimizer.
    """
    var = variational or solve_variational(problem, state, u, v, config=config)
    r1 = route1_per_particle(problem, state, u, v, var)
    r2 = route2_per_particle(adjoint, v, state.paths.grid.dt)
    diff = r1 - r2
    return GateauxResult(float(r1.mean()), float(r2.mean()), float(diff.mean()), _se(diff), r1, r2)


# Projection, optimizer, SMP residual --------------------------------------------------

def project(u, box: Box) -> np.ndarray:
    """Coordinate-wise projection onto the admissible box."""
    return box.project(np.asarray(u, dtype=float))


def smp_residual(problem: ProblemSpec, state: EnsembleSolution, adjoint: AdjointSolution, u=None,
                 atol: float = 1e-12) -> np.ndarray:
    """Violation of the variational inequality per particle and grid point.

    Zero exactly when ``<grad, a - u> >= 0`` for every admissible ``a``.
    """
    N, n = _shape(state)
    u = check_control(u if u is not None else state.u, N, n)
    return box_residual(adjoint.gradient, u, problem.control_set, atol)


def box_residual(grad: np.ndarray, u: np.ndarray, box: Box, atol: float = 1e-12) -> np.ndarray:
    at_lower = u <= box.lower + atol
    at_upper = u >= box.upper - atol
    res = np.abs(grad)
    res = np.where(at_lower, np.maximum(-grad, 0.0), res)
    res = np.where(at_upper, np.maximum(grad, 0.0), res)
    res = np.where(at_lower & at_upper, 0.0, res)
    res[:, 0] = 0.0
    return res


@dataclass(frozen=True)
class OptimizerConfig:
    """Projected-gradient settings (Armijo backtracking)."""

    step: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    max_halvings: int = 30
    tol: float = 1e-3
    max_iters: int = 200
    m_directions: int = 100


@dataclass
class OptimizationReport:
    """Iteration history of an optimizer run."""

    costs: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    termination: str = ""

    def to_dict(self) -> dict:
        return {"costs": self.costs, "gradient_norms": self.gradient_norms, "step_sizes": self.step_sizes,
                "smp_residuals": self.residuals, "termination": self.termination}


@dataclass
class OptimizationResult:
    u: np.ndarray
    report: OptimizationReport
    state: EnsembleSolution
    adjoint: AdjointSolution
    cost: CostEstimate


def _inner(a: np.ndarray, b: np.ndarray, dt: float) -> float:
    return float(dt * np.sum(a[:, 1:] * b[:, 1:]) / a.shape[0])


def optimize(problem: ProblemSpec, u0, paths: DriverPaths, config: OptimizerConfig | None = None,
             solver: SolverConfig | None = None) -> OptimizationResult:
    """Projected gradient descent on the control with backtracking on the cost."""
    config = config or OptimizerConfig()
    N, n, dt = paths.particle_count, paths.grid.n_steps, paths.grid.dt
    u = project(check_control(u0, N, n), problem.control_set)
    cost, state = cost_of(problem, u, paths, solver)
    bank = state.bank
    adj = solve_adjoint(problem, state, u, paths, solver)
    report = OptimizationReport()
    for _ in range(config.max_iters + 1):
        res = float(np.max(smp_residual(problem, state, adj, u)))
        report.costs.append(cost.value)
        report.residuals.append(res)
        report.gradient_norms.append(float(np.sqrt(_inner(adj.gradient, adj.gradient, dt))))
        if res < config.tol:
            report.termination = "converged"
            break
        if len(report.costs) > config.max_iters:
            report.termination = "max-iterations"
            break
        eta, accepted = config.step, False
        for _ in range(config.max_halvings + 1):
            trial = project(u - eta * adj.gradient, problem.control_set)
            trial_cost, trial_state = cost_of(problem, trial, paths, solver, bank=bank)
            decrease = _inner(adj.gradient, u - trial, dt)
            if trial_cost.value <= cost.value - config.armijo * decrease:
                accepted = True
                break
            eta *= config.shrink
        if not accepted:
            report.termination = "line-search-failure"
            break
        report.step_sizes.append(eta)
        u, cost, state = trial, trial_cost, trial_state
        adj = solve_adjoint(problem, state, u, paths, solver)
    return OptimizationResult(u, report, state, adj, cost)


# Sufficiency ------------------------------------------------------------------------

@dataclass
class SufficiencyReport:
    """Outcome of the convexity probe and the perturbation dominance check.

    A passed probe is evidence, not a proof of convexity.
    """

    convexity_probe_passed: bool
    worst_convexity_gap: float
    dominance_passed: bool
    dominance_violations: int
    trials: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.convexity_probe_passed and self.dominance_passed


def convexity_probe(problem: ProblemSpec, samples: int = 20, size: int = 16, seed: int = 0,
                    t: float = 0.0, tol: float = 1e-9) -> tuple[bool, float]:
    """Test the first-order convexity inequality of ``H`` and ``Phi`` on random law pairs."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(samples):
        a = rng.normal(size=(3, size)) * rng.uniform(0.5, 2.0)
        b = a + rng.normal(size=(3, size)) * rng.uniform(0.1, 2.0)
        p, q = rng.normal(size=2) * 2.0
        ones = np.ones(size)
        ens_a, ens_b = Ensemble(*a), Ensemble(*b)
        ha = hamiltonian(problem, t, *a, p * ones, q * ones, ens_a)
        hb = hamiltonian(problem, t, *b, p * ones, q * ones, ens_b)
        delta = b - a
        lin = ha.dy * delta[0] + ha.dz * delta[1] + ha.du * delta[2]
        for k, which in enumerate(("y", "z", "u")):
            lin = lin + ha.pairwise(which) @ delta[k] / size
        gap = hb.value - ha.value - lin
        phi_gap = (problem.initial_cost.value(b[0]) - problem.initial_cost.value(a[0])
                   - problem.initial_cost.partial(a[0]) * delta[0])
        phi_gap = phi_gap - _phi_law_term(problem, a[0], delta[0])
        scale = 1.0 + np.max(np.abs(hb.value)) + np.max(np.abs(ha.value))
        worst = min(worst, float(np.min(gap) / scale), float(np.min(phi_gap) / scale))
    return worst >= -tol, worst


def _phi_law_term(problem: ProblemSpec, y0: np.ndarray, delta: np.ndarray) -> np.ndarray:
    term = problem.initial_cost
    if not term.law_dependent:
        return np.zeros_like(y0)
    return term.l_derivative(y0, y0, y0) @ delta / y0.shape[0]


def random_adapted_direction(paths: DriverPaths, rng: np.random.Generator) -> np.ndarray:
    """Random direction ``a + b W_t + c (B_T - B_t)`` with per-time coefficients (adapted by construction)."""
    n = paths.grid.n_steps
    w = paths.w_values()[..., 0]
    tail = paths.b_tails()[..., 0]
    a, b, c = rng.normal(size=(3, n + 1)) * np.array([[1.0], [0.5], [0.5]])
    v = a + b * w + c * tail
    v[:, 0] = 0.0
    return v


def verify_sufficiency(problem: ProblemSpec, u, paths: DriverPaths, m: int = 100,
                       eps_grid=(0.1,), solver: SolverConfig | None = None, seed: int = 0,
                       n_se: float = 3.0) -> SufficiencyReport:
    """Convexity probe plus ``J(u) <= J(project(u + eps v)) + n_se * SE`` on random directions."""
    passed_probe, worst = convexity_probe(problem, seed=seed)
    rng = np.random.default_rng(seed)
    N, n = paths.particle_count, paths.grid.n_steps
    u = check_control(u, N, n)
    if not problem.control_set.contains(u):
        raise InvalidArgumentError("candidate control is not admissible")
    base, state = cost_of(problem, u, paths, solver)
    trials, violations = [], 0
    for _ in range(m):
        v = random_adapted_direction(paths, rng)
        for eps in eps_grid:
            trial = project(u + eps * v, problem.control_set)
            cost, _ = cost_of(problem, trial, paths, solver, bank=state.bank)
            diff = cost.per_particle - base.per_particle
            delta, se = float(diff.mean()), _se(diff)
            ok = delta >= -n_se * se
            violations += int(not ok)
            trials.append({"eps": float(eps), "delta_J": delta, "standard_error": se, "passed": bool(ok)})
    return SufficiencyReport(passed_probe, worst, violations == 0, violations, trials)


def variational_convergence(problem: ProblemSpec, state: EnsembleSolution, u, v, eps_list,
                            config: SolverConfig | None = None) -> list:
    """Ensemble mean square of ``(y^eps - y)/eps - K`` for each ``eps``."""
    var = solve_variational(problem, state, u, v, config=config)
    u = check_control(u, *_shape(state))
    out = []
    for eps in eps_list:
        pert = solve_mf_bdsde(problem, u + eps * np.asarray(v), state.paths, config, bank=state.bank)
        quotient = (pert.ys - state.ys) / eps
        out.append(float(np.mean((quotient - var.K) ** 2)))
    return out
