"""Particle solver for mean-field backward doubly stochastic equations.

The state equation ``-dy = f dt + g dB(backward) - z dW`` with ``y_T = xi`` is
discretized backward in time. On interval ``[t_i, t_{i+1}]`` the scheme reads

    y_i = A_i[y_{i+1} + f_{i+1} dt] + A_i[g_{i+1}] dB_i
    z_i = S_i[y_{i+1} + f_{i+1} dt] + S_i[g_{i+1}] dB_i

where ``A_i`` approximates the conditional expectation given ``W`` up to
``t_i`` and the ``B``-increments after ``t_{i+1}``, ``S_i`` approximates
``E[. dW_i | same] / dt``, and coefficients are evaluated at ``t_{i+1}``
(right endpoint for the backward integral). Conditioning on the interval's own
``dB_i`` is unnecessary because every target is independent of it; ``dB_i``
enters explicitly instead.

The law argument of the coefficients is frozen from the previous Picard
iterate; iterations stop when the largest per-step displacement of the
particle fields falls below tolerance.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .drivers import DriverPaths
from .errors import InvalidArgumentError, NumericalError
from .law import EmpiricalLaw, Ensemble
from .problems import ProblemSpec

REGRESSION_MODES = ("montecarlo", "tree-exact")


@dataclass(frozen=True)
class RegressionConfig:
    """Conditional-expectation approximation.

    Attributes
    ----------
    degree : int
        Total degree of polynomial features in ``(W_{t_i}, B_T - B_{t})``.
    ridge : float
        Ridge added to the normalized Gram matrix.
    mode : str
        ``"montecarlo"`` (least squares) or ``"tree-exact"`` (node averages on
        an enumerated Bernoulli tree).
    """

    degree: int = 2
    ridge: float = 1e-10
    mode: str = "montecarlo"

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise InvalidArgumentError(f"degree must be a nonnegative integer, got {self.degree}")
        if not self.ridge >= 0:
            raise InvalidArgumentError(f"ridge must be nonnegative, got {self.ridge}")
        if self.mode not in REGRESSION_MODES:
            raise InvalidArgumentError(f"mode must be one of {REGRESSION_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class SolverConfig:
    """Regression settings plus Picard controls (tolerance is scaled by ``1 + scale``)."""

    regression: RegressionConfig = field(default_factory=RegressionConfig)
    picard_tol: float = 1e-8
    max_picard: int = 50


class ConditionalExpectation:
    """Linear conditional-expectation operators for one time step.

    Parameters
    ----------
    paths : DriverPaths
    step : int
        Interval index ``i`` (``0 <= i < n_steps``).
    config : RegressionConfig
    tail_from : int
        ``B`` increments from this step on are conditioned on (``step + 1``
        inside the solver, ``step`` for the public :func:`cond_expect`).
    joint : bool
        Regress jointly on ``[phi, phi * dW_i / sqrt(dt)]`` so that the same
        fit also yields the ``dW``-slope operator.
    """

    def __init__(self, paths: DriverPaths, step: int, config: RegressionConfig,
                 tail_from: int | None = None, joint: bool = True):
        n = paths.grid.n_steps
        if not 0 <= step < n:
            raise InvalidArgumentError(f"step must lie in [0, {n - 1}], got {step}")
        self.paths, self.step, self.config = paths, step, config
        self.tail_from = step + 1 if tail_from is None else tail_from
        self.joint = joint
        self.dt = paths.grid.dt
        self.dw = paths.w_increments[:, step]
        self.degenerate = paths.particle_count == 1
        if config.mode == "tree-exact":
            if not paths.is_tree:
                raise InvalidArgumentError("tree-exact regression requires enumerated bernoulli-tree paths")
            self._init_tree()
        else:
            self._init_regression()

    # tree mode -------------------------------------------------------------
    def _init_tree(self):
        p = self.paths
        w_bits = (p.w_increments[:, :self.step] > 0).reshape(p.particle_count, -1)
        b_bits = (p.b_increments[:, self.tail_from:] > 0).reshape(p.particle_count, -1)
        bits = np.concatenate([w_bits, b_bits], axis=1)
        _, self._inverse, counts = np.unique(bits, axis=0, return_inverse=True, return_counts=True)
        self._inverse = self._inverse.ravel()
        self._counts = counts.astype(float)

    def _group_mean(self, t: np.ndarray) -> np.ndarray:
        sums = np.zeros((self._counts.shape[0],) + t.shape[1:])
        np.add.at(sums, self._inverse, t)
        return (sums / self._counts.reshape((-1,) + (1,) * (t.ndim - 1)))[self._inverse]

    # regression mode -------------------------------------------------------
    def _features(self) -> np.ndarray:
        p = self.paths
        w_now = p.w_increments[:, :self.step].sum(axis=1)
        tail = p.b_increments[:, self.tail_from:].sum(axis=1)
        variables = np.concatenate([w_now, tail], axis=1)
        cols = [np.ones(p.particle_count)]
        for deg in range(1, self.config.degree + 1):
            for combo in itertools.combinations_with_replacement(range(variables.shape[1]), deg):
                cols.append(np.prod(variables[:, combo], axis=1))
        return np.stack(cols, axis=1)

    def _init_regression(self):
        raw = self._features()
        mean, std = raw.mean(axis=0), raw.std(axis=0)
        keep = std > 1e-12 * (1.0 + np.abs(mean))
        keep[0] = True
        mean[0], std[0] = 0.0, 1.0
        phi = (raw[:, keep] - mean[keep]) / std[keep]
        phi[:, 0] = 1.0
        self.phi = phi
        blocks = [phi]
        self._phi_pos = np.arange(phi.shape[1])
        self._dw_blocks = []
        offset = phi.shape[1]
        if self.joint:
            scaled = self.dw / np.sqrt(self.dt)
            for a in range(scaled.shape[1]):
                cand = phi * scaled[:, a:a + 1]
                ok = cand.std(axis=0) > 1e-12 * (1.0 + np.abs(cand.mean(axis=0)))
                idx = np.flatnonzero(ok)
                blocks.append(cand[:, idx])
                self._dw_blocks.append((idx, np.arange(offset, offset + idx.size)))
                offset += idx.size
        X = np.concatenate(blocks, axis=1)
        N = X.shape[0]
        gram = X.T @ X / N
        if self.config.ridge == 0.0 and np.linalg.matrix_rank(X) < X.shape[1]:
            raise NumericalError(
                f"rank-deficient normal equations at step {self.step}; raise the ridge parameter")
        self._gram = gram.copy()
        gram[np.diag_indices_from(gram)] += self.config.ridge
        try:
            self._factor = cho_factor(gram)
        except LinAlgError as exc:
            raise NumericalError(
                f"singular normal equations at step {self.step}; raise the ridge parameter") from exc
        self.X = X

    def _coef(self, rhs: np.ndarray) -> np.ndarray:
        # One iterated-Tikhonov refinement: bias O(ridge^2), operator stays symmetric.
        c = cho_solve(self._factor, rhs, check_finite=False)
        return c + cho_solve(self._factor, rhs - self._gram @ c, check_finite=False)

    # public operators ------------------------------------------------------
    def mean(self, targets: np.ndarray) -> np.ndarray:
        """Conditional expectation of each target column."""
        t = np.asarray(targets, dtype=float)
        flat = t.reshape(t.shape[0], -1)
        if self.config.mode == "tree-exact":
            out = self._group_mean(flat)
        else:
            c = self._coef(self.X.T @ flat / flat.shape[0])
            out = self.phi @ c[self._phi_pos]
        return out.reshape(t.shape)

    def slope(self, targets: np.ndarray) -> np.ndarray:
        """``E[target * dW_i | .] / dt`` for each target column; trailing axis is ``l``."""
        t = np.asarray(targets, dtype=float)
        flat = t.reshape(t.shape[0], -1)
        l = self.dw.shape[1]
        if self.config.mode == "tree-exact":
            out = np.stack([self._group_mean(flat * self.dw[:, a:a + 1]) / self.dt for a in range(l)],
                           axis=-1)
        else:
            if not self.joint:
                raise InvalidArgumentError("slope requires the joint regression design")
            c = self._coef(self.X.T @ flat / flat.shape[0])
            out = np.zeros(flat.shape + (l,))
            for a, (idx, pos) in enumerate(self._dw_blocks):
                out[..., a] = self.phi[:, idx] @ c[pos] / np.sqrt(self.dt)
        return out.reshape(t.shape + (l,))

    def mean_and_slope(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """:meth:`mean` and :meth:`slope` sharing one coefficient solve."""
        t = np.asarray(targets, dtype=float)
        if self.config.mode == "tree-exact" or not self.joint:
            return self.mean(t), self.slope(t)
        flat = t.reshape(t.shape[0], -1)
        c = self._coef(self.X.T @ flat / flat.shape[0])
        l = self.dw.shape[1]
        slope = np.zeros(flat.shape + (l,))
        for a, (idx, pos) in enumerate(self._dw_blocks):
            slope[..., a] = self.phi[:, idx] @ c[pos] / np.sqrt(self.dt)
        return (self.phi @ c[self._phi_pos]).reshape(t.shape), slope.reshape(t.shape + (l,))

    def mean_adjoint(self, weights: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`mean` for the empirical inner product."""
        lam = np.asarray(weights, dtype=float)
        flat = lam.reshape(lam.shape[0], -1)
        if self.config.mode == "tree-exact":
            out = self._group_mean(flat)
        else:
            rhs = np.zeros((self.X.shape[1], flat.shape[1]))
            rhs[self._phi_pos] = self.phi.T @ flat / flat.shape[0]
            out = self.X @ self._coef(rhs)
        return out.reshape(lam.shape)

    def slope_adjoint(self, weights: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`slope`; ``weights`` carry a trailing axis of size ``l``."""
        mu = np.asarray(weights, dtype=float)
        l = self.dw.shape[1]
        flat = mu.reshape(mu.shape[0], -1, l)
        if self.config.mode == "tree-exact":
            out = sum(self.dw[:, a:a + 1] * self._group_mean(flat[..., a]) / self.dt for a in range(l))
        else:
            rhs = np.zeros((self.X.shape[1], flat.shape[1]))
            for a, (idx, pos) in enumerate(self._dw_blocks):
                rhs[pos] += self.phi[:, idx].T @ flat[..., a] / (flat.shape[0] * np.sqrt(self.dt))
            out = self.X @ self._coef(rhs)
        return out.reshape(mu.shape[:-1])


class OperatorBank:
    """Lazily built per-step operators shared by state, adjoint and variational solves."""

    def __init__(self, paths: DriverPaths, config: RegressionConfig):
        self.paths, self.config = paths, config
        self._ops: dict[int, ConditionalExpectation] = {}

    def step(self, i: int) -> ConditionalExpectation:
        if i not in self._ops:
            self._ops[i] = ConditionalExpectation(self.paths, i, self.config)
        return self._ops[i]


def cond_expect(targets: np.ndarray, paths: DriverPaths, step: int,
                config: RegressionConfig | None = None) -> np.ndarray:
    """Approximate ``E[target | W up to t_i, B increments after t_i]`` per particle.

    Monte Carlo mode projects onto polynomial features of ``(W_{t_i}, B_T - B_{t_i})``;
    tree-exact mode averages over all leaves through the same node.
    """
    config = config or RegressionConfig()
    t = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(t)):
        raise InvalidArgumentError("targets must be finite")
    op = ConditionalExpectation(paths, step, config, tail_from=step, joint=False)
    return op.mean(t)


# Coefficients ---------------------------------------------------------------

class BackwardCoefficients(Protocol):
    """Coefficients of a backward equation in particle form.

    ``rows`` selects which particles' exogenous data (control, frozen state
    of a linearization) belong to the evaluation points; ``frozen_y`` and
    ``frozen_z`` are the support of the law at the same step.
    """

    law_dependent: bool

    def terminal(self, paths: DriverPaths) -> np.ndarray: ...

    def drift(self, i, y, z, frozen_y, frozen_z, rows) -> np.ndarray: ...

    def diffusion(self, i, y, z, frozen_y, frozen_z, rows) -> np.ndarray: ...


class ControlledCoefficients:
    """Binds a scalar :class:`ProblemSpec` to a control array ``u`` of shape ``(N, n+1)``."""

    def __init__(self, problem: ProblemSpec, u: np.ndarray, paths: DriverPaths):
        if paths.dims != (1, 1):
            raise InvalidArgumentError("control problems are scalar: both drivers must be one-dimensional")
        self.problem = problem
        self.grid = paths.grid
        n = paths.grid.n_steps
        self.u = check_control(u, paths.particle_count, n)
        self.law_dependent = problem.state_law_dependent

    def terminal(self, paths):
        return self.problem.terminal_values(paths)[:, None]

    def _args(self, i, y, z, frozen_y, frozen_z, rows):
        uu = self.u[rows, i]
        ens = Ensemble(frozen_y[:, 0], frozen_z[:, 0, 0], uu)
        return self.grid.points[i], y[:, 0], z[:, 0, 0], uu, ens

    def drift(self, i, y, z, frozen_y, frozen_z, rows):
        return self.problem.drift.value(*self._args(i, y, z, frozen_y, frozen_z, rows))[:, None]

    def diffusion(self, i, y, z, frozen_y, frozen_z, rows):
        return self.problem.diffusion.value(*self._args(i, y, z, frozen_y, frozen_z, rows))[:, None, None]


def check_control(u, N: int, n: int) -> np.ndarray:
    """Return ``u`` as a float array of shape ``(N, n+1)``; scalars broadcast."""
    arr = np.asarray(0.0 if u is None else u, dtype=float)
    if arr.ndim == 0:
        arr = np.full((N, n + 1), float(arr))
    if arr.shape != (N, n + 1):
        raise InvalidArgumentError(f"control must have shape ({N}, {n + 1}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("control values must be finite")
    return arr


def bind(spec, u, paths: DriverPaths):
    if isinstance(spec, ProblemSpec):
        if u is not None and not spec.control_set.contains(u):
            raise InvalidArgumentError("control values lie outside the admissible box")
        return ControlledCoefficients(spec, u, paths)
    return spec


# Solutions ------------------------------------------------------------------

@dataclass
class EnsembleSolution:
    """Particle fields on the grid.

    Attributes
    ----------
    y : numpy.ndarray
        Shape ``(N, n_steps + 1, n)``.
    z : numpy.ndarray
        Shape ``(N, n_steps + 1, n, l)``; the terminal entry is zero by convention.
    u : numpy.ndarray or None
        Control used, shape ``(N, n_steps + 1)``.
    status : str
        ``"converged"`` or ``"max-iterations"``.
    displacements : list of float
        Largest per-step displacement of each Picard iteration.
    """

    paths: DriverPaths = field(repr=False)
    y: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    u: np.ndarray | None = field(default=None, repr=False)
    status: str = "converged"
    iterations: int = 1
    displacements: list = field(default_factory=list)
    regression_residuals: list = field(default_factory=list)
    degenerate: bool = False
    bank: OperatorBank | None = field(default=None, repr=False)

    @property
    def ys(self) -> np.ndarray:
        """Scalar ``y`` as ``(N, n_steps + 1)``."""
        return self.y[..., 0]

    @property
    def zs(self) -> np.ndarray:
        """Scalar ``z`` as ``(N, n_steps + 1)``."""
        return self.z[..., 0, 0]

    def law(self, i: int) -> EmpiricalLaw:
        fields_ = {"y": self.y[:, i], "z": self.z[:, i]}
        if self.u is not None:
            fields_["u"] = self.u[:, i]
        return EmpiricalLaw.from_fields(**fields_)

    def law_trajectory(self) -> list:
        return [self.law(i) for i in range(self.y.shape[1])]

    def diagnostics(self) -> dict:
        return {"status": self.status, "iterations": self.iterations,
                "picard_displacements": list(map(float, self.displacements)),
                "regression_residuals": list(map(float, self.regression_residuals)),
                "degenerate_ensemble": bool(self.degenerate)}


def step_displacement(y_new, y_old, z_new, z_old) -> float:
    """Largest over steps of the particle-coupling RMS distance of ``(y, z)``.

    The index coupling bounds the Wasserstein-2 distance of the laws from above.
    """
    dy = ((y_new - y_old) ** 2).reshape(y_new.shape[0], y_new.shape[1], -1).sum(axis=2)
    dz = ((z_new - z_old) ** 2).reshape(z_new.shape[0], z_new.shape[1], -1).sum(axis=2)
    return float(np.sqrt(np.max(np.mean(dy + dz, axis=0))))


def _sweep(coeffs, paths: DriverPaths, bank: OperatorBank, xi, frozen_y, frozen_z):
    N, n = paths.particle_count, paths.grid.n_steps
    dt = paths.grid.dt
    nd, l = xi.shape[1], paths.dims[0]
    y = np.empty((N, n + 1, nd))
    z = np.zeros((N, n + 1, nd, l))
    y[:, n] = xi
    rows = slice(None)
    residuals = []
    for i in range(n - 1, -1, -1):
        f1 = np.asarray(coeffs.drift(i + 1, y[:, i + 1], z[:, i + 1], frozen_y[:, i + 1],
                                     frozen_z[:, i + 1], rows), dtype=float)
        g1 = np.asarray(coeffs.diffusion(i + 1, y[:, i + 1], z[:, i + 1], frozen_y[:, i + 1],
                                         frozen_z[:, i + 1], rows), dtype=float)
        d = g1.shape[2]
        target = y[:, i + 1] + f1 * dt
        stack = np.concatenate([target, g1.reshape(N, nd * d)], axis=1)
        op = bank.step(i)
        m, s = op.mean_and_slope(stack)
        db = paths.b_increments[:, i]
        y[:, i] = m[:, :nd] + np.einsum("jkd,jd->jk", m[:, nd:].reshape(N, nd, d), db)
        z[:, i] = s[:, :nd] + np.einsum("jkdl,jd->jkl", s[:, nd:].reshape(N, nd, d, l), db)
        if not (np.all(np.isfinite(y[:, i])) and np.all(np.isfinite(z[:, i]))):
            raise NumericalError(f"non-finite solution values at step {i}")
        fit = m[:, :nd] + np.einsum("jkl,jl->jk", s[:, :nd], paths.w_increments[:, i])
        residuals.append(float(np.sqrt(np.mean((target - fit) ** 2))))
    return y, z, residuals[::-1]


def solve_mf_bdsde(spec, u, paths: DriverPaths, config: SolverConfig | None = None,
                   bank: OperatorBank | None = None, initial: EnsembleSolution | None = None
                   ) -> EnsembleSolution:
    """Solve the (mean-field) backward doubly stochastic equation on a particle ensemble.

    Parameters
    ----------
    spec : ProblemSpec or BackwardCoefficients
        A scalar control problem (bound to ``u``) or raw coefficients.
    u : array_like or None
        Control of shape ``(N, n_steps + 1)`` (ignored for raw coefficients).
    paths : DriverPaths
    config : SolverConfig, optional
    bank : OperatorBank, optional
        Reuse conditional-expectation operators built for the same paths.
    initial : EnsembleSolution, optional
        Starting Picard iterate (defaults to ``y = xi`` on every step, ``z = 0``).
    """
    config = config or SolverConfig()
    coeffs = bind(spec, u, paths)
    if bank is None or bank.paths is not paths or bank.config != config.regression:
        bank = OperatorBank(paths, config.regression)
    N, n = paths.particle_count, paths.grid.n_steps
    xi = np.asarray(coeffs.terminal(paths), dtype=float)
    if xi.ndim != 2 or xi.shape[0] != N:
        raise InvalidArgumentError("terminal datum must have shape (N, n)")
    if initial is not None:
        frozen_y, frozen_z = initial.y.copy(), initial.z.copy()
    else:
        frozen_y = np.repeat(xi[:, None, :], n + 1, axis=1)
        frozen_z = np.zeros((N, n + 1, xi.shape[1], paths.dims[0]))
    max_iter = config.max_picard if coeffs.law_dependent else 1
    displacements, status, iterations = [], "max-iterations", 0
    for _ in range(max_iter):
        y, z, residuals = _sweep(coeffs, paths, bank, xi, frozen_y, frozen_z)
        iterations += 1
        if not coeffs.law_dependent:
            status = "converged"
            break
        disp = step_displacement(y, frozen_y, z, frozen_z)
        displacements.append(disp)
        frozen_y, frozen_z = y, z
        scale = float(np.sqrt(np.max(np.mean(y.reshape(N, n + 1, -1) ** 2 * y.shape[2], axis=(0, 2)))))
        if disp <= config.picard_tol * (1.0 + scale):
            status = "converged"
            break
    u_arr = getattr(coeffs, "u", None)
    return EnsembleSolution(paths, y, z, u_arr, status, iterations, displacements, residuals,
                            degenerate=N == 1, bank=bank)


# Exact tree solver -------------------------------------------------------------

class TreeIndex:
    """Node bookkeeping for an enumerated sign tree.

    The node of a leaf at step ``i`` is identified by its ``W`` signs before
    ``i`` and its ``B`` signs from ``i`` on.
    """

    def __init__(self, paths: DriverPaths):
        if not paths.is_tree:
            raise InvalidArgumentError("exact tree solver requires enumerated bernoulli-tree paths")
        self.paths = paths
        n = paths.grid.n_steps
        self.w_sign = np.sign(paths.w_increments).astype(int)
        self.b_sign = np.sign(paths.b_increments).astype(int)
        self.keys, self.node_of, self.reps = [], [], []
        for i in range(n + 1):
            table: dict = {}
            node_of = np.empty(paths.particle_count, dtype=int)
            reps = []
            for j in range(paths.particle_count):
                key = self.key(j, i)
                if key not in table:
                    table[key] = len(reps)
                    reps.append(j)
                node_of[j] = table[key]
            self.keys.append(table)
            self.node_of.append(node_of)
            self.reps.append(np.array(reps))

    def key(self, leaf: int, i: int) -> tuple:
        return (tuple(self.w_sign[leaf, :i].ravel()), tuple(self.b_sign[leaf, i:].ravel()))

    def size(self, i: int) -> int:
        return self.reps[i].shape[0]

    def children(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Child node indices at ``i+1`` of every node at ``i``, with the ``W`` sign of each branch."""
        l = self.w_sign.shape[2]
        branches = list(itertools.product((-1, 1), repeat=l))
        idx = np.empty((self.size(i), len(branches)), dtype=int)
        for k, leaf in enumerate(self.reps[i]):
            w_past, b_tail = self.key(leaf, i)
            d = self.b_sign.shape[2]
            for c, s in enumerate(branches):
                idx[k, c] = self.keys[i + 1][(w_past + s, b_tail[d:])]
        return idx, np.array(branches, dtype=float)

    def parents(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Parent node indices at ``i`` of every node at ``i+1``, with the ``B`` sign of each branch."""
        d = self.b_sign.shape[2]
        branches = list(itertools.product((-1, 1), repeat=d))
        idx = np.empty((self.size(i + 1), len(branches)), dtype=int)
        l = self.w_sign.shape[2]
        for k, leaf in enumerate(self.reps[i + 1]):
            w_past, b_tail = self.key(leaf, i + 1)
            for c, s in enumerate(branches):
                idx[k, c] = self.keys[i][(w_past[:len(w_past) - l], s + b_tail)]
        return idx, np.array(branches, dtype=float)

    def node_values(self, leaf_values: np.ndarray, i: int, what: str = "values",
                    atol: float = 1e-12) -> np.ndarray:
        """Collapse per-leaf values to nodes, checking they are constant within each node."""
        vals = np.asarray(leaf_values, dtype=float)
        node = vals[self.reps[i]]
        spread = np.max(np.abs(vals - node[self.node_of[i]])) if vals.size else 0.0
        if spread > atol * (1.0 + np.max(np.abs(vals))):
            raise InvalidArgumentError(f"{what} at step {i} are not measurable with respect to the node")
        return node

    def expand(self, node_arrays: list) -> np.ndarray:
        return np.stack([arr[self.node_of[i]] for i, arr in enumerate(node_arrays)], axis=1)


def solve_on_tree(spec, u, paths: DriverPaths, tol: float = 1e-13, max_picard: int = 200
                  ) -> EnsembleSolution:
    """Exact backward induction on an enumerated tree, with node laws in the Picard loop."""
    coeffs = bind(spec, u, paths)
    tree = TreeIndex(paths)
    n, dt = paths.grid.n_steps, paths.grid.dt
    root = np.sqrt(dt)
    xi_leaf = np.asarray(coeffs.terminal(paths), dtype=float)
    nd = xi_leaf.shape[1]
    l = paths.dims[0]
    xi = tree.node_values(xi_leaf, n, "terminal values")
    Y = [np.broadcast_to(xi.mean(axis=0), (tree.size(i), nd)).copy() for i in range(n + 1)]
    Z = [np.zeros((tree.size(i), nd, l)) for i in range(n + 1)]
    links = [tree.children(i) for i in range(n)]
    b_of = [tree.node_values(paths.b_increments[:, i] / root, i, "B signs") for i in range(n)]
    displacements, status, iterations = [], "max-iterations", 0
    for _ in range(max_picard if coeffs.law_dependent else 1):
        fY, fZ = Y, Z
        Y = [None] * (n + 1)
        Z = [None] * (n + 1)
        Y[n], Z[n] = xi.copy(), np.zeros((tree.size(n), nd, l))
        for i in range(n - 1, -1, -1):
            reps = tree.reps[i + 1]
            f1 = coeffs.drift(i + 1, Y[i + 1], Z[i + 1], fY[i + 1], fZ[i + 1], reps)
            g1 = coeffs.diffusion(i + 1, Y[i + 1], Z[i + 1], fY[i + 1], fZ[i + 1], reps)
            child, signs = links[i]
            beta = b_of[i] * root
            # Per node: values along each W branch, with the node's own B increment.
            branch = (Y[i + 1][child] + f1[child] * dt
                      + np.einsum("kcnd,kd->kcn", g1[child], beta))
            Y[i] = branch.mean(axis=1)
            Z[i] = np.einsum("kcn,cl->knl", branch, signs * root) / (signs.shape[0] * dt)
        iterations += 1
        if not coeffs.law_dependent:
            status = "converged"
            break
        disp = max(float(np.sqrt(np.mean(np.sum((Y[i] - fY[i]) ** 2, axis=1)
                                         + np.sum((Z[i] - fZ[i]) ** 2, axis=(1, 2)))))
                   for i in range(n + 1))
        displacements.append(disp)
        scale = max(float(np.sqrt(np.mean(np.sum(v**2, axis=1)))) for v in Y)
        if disp <= tol * (1.0 + scale):
            status = "converged"
            break
    y, z = tree.expand(Y), tree.expand(Z)
    return EnsembleSolution(paths, y, z, getattr(coeffs, "u", None), status, iterations, displacements)


# Integrated identities ---------------------------------------------------------

def backward_residuals(values, z, drift_int, diff_int, paths: DriverPaths) -> np.ndarray:
    """Per-path residual ``v_i - v_n - sum_{k>=i} (drift_k dt + diff_k dB_k - z_k dW_k)``.

    ``drift_int`` and ``diff_int`` are given per interval ``k`` (already at the
    evaluation point the scheme uses). Returns shape ``(N, n+1, dim)``.
    """
    v = np.asarray(values, dtype=float)
    N, npts = v.shape[:2]
    v = v.reshape(N, npts, -1)
    dt = paths.grid.dt
    dr = np.asarray(drift_int, dtype=float).reshape(N, npts - 1, v.shape[2])
    df = np.asarray(diff_int, dtype=float).reshape(N, npts - 1, v.shape[2], -1)
    zz = np.asarray(z, dtype=float).reshape(N, npts, v.shape[2], -1)
    incr = (dr * dt + np.einsum("jknd,jkd->jkn", df, paths.b_increments)
            - np.einsum("jknl,jkl->jkn", zz[:, :-1], paths.w_increments))
    tail = np.concatenate([np.cumsum(incr[:, ::-1], axis=1)[:, ::-1], np.zeros_like(incr[:, :1])], axis=1)
    return v - v[:, -1:] - tail


def forward_residuals(values, drift_int, dw_int, db_int, paths: DriverPaths) -> np.ndarray:
    """Per-path residual ``v_i - v_0 - sum_{k<i} (drift_k dt + dw_k dW_k - db_k dB_k)``."""
    v = np.asarray(values, dtype=float)
    N, npts = v.shape[:2]
    v = v.reshape(N, npts, -1)
    dt = paths.grid.dt
    dr = np.asarray(drift_int, dtype=float).reshape(N, npts - 1, v.shape[2])
    gw = np.asarray(dw_int, dtype=float).reshape(N, npts - 1, v.shape[2], -1)
    gb = np.asarray(db_int, dtype=float).reshape(N, npts - 1, v.shape[2], -1)
    incr = (dr * dt + np.einsum("jknl,jkl->jkn", gw, paths.w_increments)
            - np.einsum("jknd,jkd->jkn", gb, paths.b_increments))
    head = np.concatenate([np.zeros_like(incr[:, :1]), np.cumsum(incr, axis=1)], axis=1)
    return v - v[:, :1] - head


def _rms(r: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.sum(r**2, axis=2), axis=0))


def backward_identity(values, z, drift_int, diff_int, paths: DriverPaths) -> np.ndarray:
    """Per-step RMS of :func:`backward_residuals`."""
    return _rms(backward_residuals(values, z, drift_int, diff_int, paths))


def forward_identity(values, drift_int, dw_int, db_int, paths: DriverPaths) -> np.ndarray:
    """Per-step RMS of :func:`forward_residuals`."""
    return _rms(forward_residuals(values, drift_int, dw_int, db_int, paths))


def mean_residual_score(residuals: np.ndarray, step: int) -> float:
    """``|mean| / standard error`` of the per-path residuals at one grid point.

    Regression leaves a projection remainder on Monte Carlo paths, so pathwise
    residuals are not small there; their mean is, up to sampling error. Use
    the full-horizon step (``0`` for backward, ``n`` for forward identities).
    """
    r = np.asarray(residuals, dtype=float)[:, step].reshape(residuals.shape[0], -1)
    mean = np.abs(r.mean(axis=0))
    se = r.std(axis=0, ddof=1) / np.sqrt(r.shape[0])
    floor = 1e-12 * (1.0 + np.abs(r).max())
    return float(np.max(mean / np.maximum(se, floor)))


def coefficient_paths(spec, u, solution: EnsembleSolution):
    """Drift and diffusion per interval, evaluated at the right endpoint with the solution's own law."""
    paths = solution.paths
    coeffs = bind(spec, u if u is not None else solution.u, paths)
    n = paths.grid.n_steps
    rows = slice(None)
    f = np.stack([coeffs.drift(i + 1, solution.y[:, i + 1], solution.z[:, i + 1], solution.y[:, i + 1],
                               solution.z[:, i + 1], rows) for i in range(n)], axis=1)
    g = np.stack([coeffs.diffusion(i + 1, solution.y[:, i + 1], solution.z[:, i + 1],
                                   solution.y[:, i + 1], solution.z[:, i + 1], rows) for i in range(n)],
                 axis=1)
    return f, g


def residual_check(solution: EnsembleSolution, spec, paths: DriverPaths | None = None,
                   u=None) -> np.ndarray:
    """Per-step RMS residual of the discrete integrated state identity."""
    if paths is not None and paths is not solution.paths:
        solution = EnsembleSolution(paths, solution.y, solution.z, solution.u)
    f, g = coefficient_paths(spec, u, solution)
    return backward_identity(solution.y, solution.z, f, g, solution.paths)
