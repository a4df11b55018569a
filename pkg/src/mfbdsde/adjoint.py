"""Hamiltonian and the forward doubly stochastic adjoint equation.

The adjoint pair solves ``dp = F dt + G dW - q dB(backward)`` with a datum at
``t = 0``; for the control problem ``F = d_y H + E~[d_{mu_y} H]`` and
``G = d_z H + E~[d_{mu_z} H]``.

It is marched forward in time with the transposes of the conditional
expectation operators used by the state solver, so the discrete adjoint is
the exact dual of the discrete state equation: on ``[t_i, t_{i+1}]``

    p^_{i+1} = A_i^T p_i + S_i^T (dt G_i)
    q_{i+1}  = (A_i^T (p_i dB_i) + S_i^T (dt G_i dB_i)) / dt
    p_{i+1}  = p^_{i+1} + dt F(t_{i+1}, p^_{i+1}, q_{i+1})

where ``p^`` is the value entering the Hamiltonian at ``t_{i+1}``.
"""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .bdsde import EnsembleSolution, OperatorBank, SolverConfig, TreeIndex, check_control, forward_identity
from .drivers import DriverPaths
from .errors import InvalidArgumentError, NumericalError
from .law import Ensemble, l_derivative
from .problems import ProblemSpec


@dataclass
class HamiltonianEval:
    """Hamiltonian ``<f, p> + <g, q> + h`` and its derivatives at one time slice.

    Attributes
    ----------
    value : numpy.ndarray
        Per-particle Hamiltonian.
    dy, dz, du : numpy.ndarray
        Ordinary partials.
    dp, dq : numpy.ndarray
        Partials in ``p`` and ``q`` (equal to ``f`` and ``g``).
    mf_y, mf_z, mf_u : numpy.ndarray
        ``E~[d_{mu_.} H(theta~, p~, q~)(theta)]`` per particle.
    """

    value: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    du: np.ndarray
    dp: np.ndarray
    dq: np.ndarray
    mf_y: np.ndarray
    mf_z: np.ndarray
    mf_u: np.ndarray
    pairwise: Callable[[str], np.ndarray] = field(repr=False, default=None)


def hamiltonian(problem: ProblemSpec, t: float, y, z, u, p, q, ens: Ensemble | None = None
                ) -> HamiltonianEval:
    """Evaluate the Hamiltonian of a scalar problem on an ensemble slice.

    ``ens`` is the law of ``(y, z, u)``; it defaults to the slice itself.
    ``p`` and ``q`` are the adjoint values of the same particles.
    """
    y, z, u, p, q = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (y, z, u, p, q))
    n = max(v.shape[0] for v in (y, z, u, p, q))
    y, z, u, p, q = (np.broadcast_to(v, (n,)).astype(float) for v in (y, z, u, p, q))
    ens = ens or Ensemble(y, z, u)
    f, g, h = problem.drift, problem.diffusion, problem.running_cost
    fv, gv, hv = (term.value(t, y, z, u, ens) for term in (f, g, h))
    fg, gg, hg = (term.grad(t, y, z, u, ens) for term in (f, g, h))
    grads = [fg[k] * p + gg[k] * q + hg[k] for k in range(3)]
    mfs = mean_field_adjoint(problem, t, ens, p, q)

    def pairwise(which: str) -> np.ndarray:
        # Entry (i, j): d_{mu_which} H(theta_i, p_i, q_i)(theta_j).
        spec, base = problem.interaction, (y, z, u)
        out = np.zeros((n, ens.y.shape[0]))
        for name, weight in (("f", p), ("g", q), ("h", np.ones(n))):
            if spec.terms[name].law_dependent:
                point = (ens.y, ens.z, ens.u)
                out += weight[:, None] * l_derivative(spec, which, base, ens, point, name, t)
        return out

    return HamiltonianEval(fv * p + gv * q + hv, *grads, fv, gv, *mfs, pairwise)


def mean_field_adjoint(problem: ProblemSpec, t, ens: Ensemble, p, q):
    """``E~[d_{mu_.} H(theta~, p~, q~)(theta)]`` for ``. = y, z, u`` on the ensemble."""
    n = ens.y.shape[0]
    out = [np.zeros(n), np.zeros(n), np.zeros(n)]
    for term, weight in ((problem.drift, p), (problem.diffusion, q), (problem.running_cost, np.ones(n))):
        if term.law_dependent:
            for k, v in enumerate(term.mf_adjoint(t, ens, weight)):
                out[k] = out[k] + v
    return tuple(out)


def adjoint_initial(problem: ProblemSpec, y0: np.ndarray) -> np.ndarray:
    """Adjoint datum ``d_y Phi(y_0) + E~[d_{mu_y} Phi(y~_0)(y_0)]`` per particle."""
    return np.asarray(problem.initial_cost.total_gradient(np.asarray(y0, dtype=float)), dtype=float)


class HamiltonianData:
    """Hamiltonian partials along a solved state, including mean-field terms.

    ``rows`` restricts to a subset of particles; the law is then the uniform
    law on that subset (used with one representative particle per tree node).
    """

    def __init__(self, problem: ProblemSpec, state: EnsembleSolution, u):
        self.problem, self.state = problem, state
        self.u = check_control(u if u is not None else state.u, state.y.shape[0], state.y.shape[1] - 1)
        self.points = state.paths.grid.points

    def at(self, i, rows=slice(None)):
        y, z, u = self.state.ys[rows, i], self.state.zs[rows, i], self.u[rows, i]
        return self.points[i], y, z, u, Ensemble(y, z, u)

    def partials(self, i, p, q, rows=slice(None)):
        """``(H_y, H_z, H_u)`` with mean-field terms at grid point ``i``."""
        t, y, z, u, ens = self.at(i, rows)
        ev = hamiltonian(self.problem, t, y, z, u, p, q, ens)
        return ev.dy + ev.mf_y, ev.dz + ev.mf_z, ev.du + ev.mf_u


@dataclass
class ForwardSolution:
    """Output of a forward march.

    Attributes
    ----------
    p : numpy.ndarray
        ``(N, n+1)`` values after the drift update (``p_0`` is the datum).
    p_hat : numpy.ndarray
        ``(N, n+1)`` values entering the coefficients at each grid point.
    q : numpy.ndarray
        ``(N, n+1)`` backward-integrand; ``q_0 = 0`` by convention.
    drift, dw : numpy.ndarray
        ``F`` and ``G`` at each grid point (``G_0 = 0``).
    """

    p: np.ndarray
    p_hat: np.ndarray
    q: np.ndarray
    drift: np.ndarray
    dw: np.ndarray


def march_forward(paths: DriverPaths, bank: OperatorBank, datum: np.ndarray,
                  step_fn: Callable) -> ForwardSolution:
    """March a scalar forward doubly stochastic equation.

    ``step_fn(i, p_hat, q)`` returns ``(F_i, G_i)`` at grid point ``i >= 1``.
    """
    if paths.dims != (1, 1):
        raise InvalidArgumentError("the forward march is implemented for scalar drivers")
    N, n, dt = paths.particle_count, paths.grid.n_steps, paths.grid.dt
    P, ph, q, F, G = (np.zeros((N, n + 1)) for _ in range(5))
    P[:, 0] = ph[:, 0] = np.broadcast_to(np.asarray(datum, dtype=float), (N,))
    for i in range(n):
        op = bank.step(i)
        db = paths.b_increments[:, i, 0]
        lam = np.stack([P[:, i], P[:, i] * db], axis=1)
        mu = np.stack([dt * G[:, i], dt * G[:, i] * db], axis=1)[..., None]
        moved = op.mean_adjoint(lam) + op.slope_adjoint(mu)
        ph[:, i + 1], q[:, i + 1] = moved[:, 0], moved[:, 1] / dt
        Fi, Gi = step_fn(i + 1, ph[:, i + 1], q[:, i + 1])
        F[:, i + 1], G[:, i + 1] = Fi, Gi
        P[:, i + 1] = ph[:, i + 1] + dt * F[:, i + 1]
        if not (np.all(np.isfinite(P[:, i + 1])) and np.all(np.isfinite(q[:, i + 1]))):
            raise NumericalError(f"non-finite adjoint values at step {i + 1}")
    return ForwardSolution(P, ph, q, F, G)


def march_forward_on_tree(paths: DriverPaths, datum: np.ndarray, step_fn: Callable) -> ForwardSolution:
    """Node-by-node forward march on an enumerated tree (independent of the regression operators).

    ``step_fn(i, p_hat, q, rows)`` receives node values and one representative
    leaf per node.
    """
    tree = TreeIndex(paths)
    if paths.dims != (1, 1):
        raise InvalidArgumentError("the forward march is implemented for scalar drivers")
    n, dt = paths.grid.n_steps, paths.grid.dt
    root = np.sqrt(dt)
    P = [tree.node_values(np.broadcast_to(datum, (paths.particle_count,)), 0, "adjoint datum")]
    ph, q = [P[0].copy()], [np.zeros(tree.size(0))]
    F, G = [np.zeros(tree.size(0))], [np.zeros(tree.size(0))]
    for i in range(n):
        parent, signs = tree.parents(i)
        beta = signs[:, 0] * root
        w_now = tree.w_sign[tree.reps[i + 1], i, 0] * root
        P_par, G_par = P[i][parent], G[i][parent]
        p_new = P_par.mean(axis=1) + w_now * G_par.mean(axis=1)
        q_new = ((P_par * beta).mean(axis=1) + w_now * (G_par * beta).mean(axis=1)) / dt
        Fi, Gi = step_fn(i + 1, p_new, q_new, tree.reps[i + 1])
        ph.append(p_new)
        q.append(q_new)
        F.append(np.asarray(Fi, dtype=float))
        G.append(np.asarray(Gi, dtype=float))
        P.append(p_new + dt * F[-1])
    return ForwardSolution(*(tree.expand(arr) for arr in (P, ph, q, F, G)))


@dataclass
class AdjointSolution:
    """Adjoint fields and the control gradient.

    Attributes
    ----------
    p, p_hat, q : numpy.ndarray
        As in :class:`ForwardSolution`.
    gradient : numpy.ndarray
        ``(N, n+1)``: ``d_u H + E~[d_{mu_u} H]`` at ``t_1..t_n``; column 0 is zero
        because the control at ``t_0`` does not enter the scheme.
    """

    p: np.ndarray
    p_hat: np.ndarray
    q: np.ndarray
    drift: np.ndarray
    dw: np.ndarray
    gradient: np.ndarray
    status: str = "converged"

    def diagnostics(self) -> dict:
        return {"status": self.status}


def _hamiltonian_step(ham: HamiltonianData, grad: np.ndarray, tree: bool):
    def step(i, p_hat, q, rows=slice(None)):
        hy, hz, hu = ham.partials(i, p_hat, q, rows)
        if tree:
            grad[i] = hu
        else:
            grad[:, i] = hu
        return hy, hz
    return step


def solve_adjoint(problem: ProblemSpec, state: EnsembleSolution, u, paths: DriverPaths | None = None,
                  config: SolverConfig | None = None) -> AdjointSolution:
    """Solve the adjoint equation along a state solution on the same ensemble."""
    paths = paths or state.paths
    if paths is not state.paths:
        raise InvalidArgumentError("adjoint and state must share one ensemble")
    config = config or SolverConfig()
    bank = state.bank if state.bank is not None and state.bank.config == config.regression \
        else OperatorBank(paths, config.regression)
    ham = HamiltonianData(problem, state, u)
    grad = np.zeros_like(state.ys)
    fwd = march_forward(paths, bank, adjoint_initial(problem, state.ys[:, 0]),
                        _hamiltonian_step(ham, grad, tree=False))
    return AdjointSolution(fwd.p, fwd.p_hat, fwd.q, fwd.drift, fwd.dw, grad)


def adjoint_on_tree(problem: ProblemSpec, state: EnsembleSolution, u, paths: DriverPaths | None = None
                    ) -> AdjointSolution:
    """Exact node-form adjoint along a tree state solution."""
    paths = paths or state.paths
    ham = HamiltonianData(problem, state, u)
    tree = TreeIndex(paths)
    grads = {}

    def step(i, p_hat, q, rows):
        hy, hz, hu = ham.partials(i, p_hat, q, rows)
        grads[i] = hu
        return hy, hz

    fwd = march_forward_on_tree(paths, adjoint_initial(problem, state.ys[:, 0]), step)
    grad_nodes = [np.zeros(tree.size(0))] + [grads[i] for i in range(1, paths.grid.n_steps + 1)]
    return AdjointSolution(fwd.p, fwd.p_hat, fwd.q, fwd.drift, fwd.dw, tree.expand(grad_nodes))


def adjoint_residual(adj, paths: DriverPaths) -> np.ndarray:
    """Per-step RMS residual of ``p_i - p_0 - sum_{k<i}(F_{k+1} dt + G_k dW_k - q_{k+1} dB_k)``."""
    return forward_identity(adj.p, adj.drift[:, 1:], adj.dw[:, :-1], adj.q[:, 1:], paths)


def reverse_time_transform(paths: DriverPaths, *arrays: np.ndarray):
    """Reverse time: ``W`` becomes the backward driver and ``B`` the forward one.

    Grid-indexed arrays (axis 1 of length ``n+1``) and interval-indexed arrays
    (length ``n``) are both reversed along axis 1. Applying the transform twice
    returns the inputs exactly.
    """
    n = paths.grid.n_steps
    out = []
    for arr in arrays:
        arr = np.asarray(arr)
        if arr.ndim < 2 or arr.shape[1] not in (n, n + 1) or arr.shape[0] != paths.particle_count:
            raise InvalidArgumentError(f"array of shape {arr.shape} does not match the grid")
        out.append(arr[:, ::-1].copy())
    reversed_paths = DriverPaths(paths.grid, paths.b_increments[:, ::-1].copy(),
                                 paths.w_increments[:, ::-1].copy(), paths.seed, paths.mode)
    return (reversed_paths, *out)
