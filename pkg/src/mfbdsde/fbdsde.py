"""Coupled mean-field forward-backward doubly stochastic systems.

The backward component ``y`` is marched with the state scheme and the forward
component ``p`` with the forward march of :mod:`mfbdsde.adjoint`, so a solved
Hamiltonian system is the exact discrete optimality system of the control
problem. Coupled systems are solved by the method of continuation: a
homotopy from a decoupled-enough base system (``alpha = 0``) to the target
(``alpha = 1``), advancing ``alpha`` by Picard iteration of a contraction map.

All fields are scalar (``n = l = d = 1``). Coefficient callables take one time
slice ``(t, y, p, z, q)`` of the whole ensemble; mean-field terms are computed
from those arrays, so the law is the empirical law of the slice.
"""
from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

from .adjoint import march_forward, march_forward_on_tree
from .bdsde import (OperatorBank, RegressionConfig, SolverConfig, backward_residuals, forward_residuals,
                    mean_residual_score, solve_mf_bdsde, solve_on_tree)
from .drivers import DriverPaths
from .errors import InvalidArgumentError
from .law import EmpiricalLaw, wasserstein2
from .problems import LqCoefficients, affine_terminal, constant_terminal

COEFFICIENTS = ("f", "g", "F", "G")


@dataclass
class FbdsdeSpec:
    """Scalar coupled system ``-dy = f dt + g dB - z dW``, ``dp = F dt + G dW - q dB``.

    Boundary conditions are ``y_T = xi`` and ``p_0 = Psi(y_0)``.

    Attributes
    ----------
    f, g, F, G : callable
        ``(t, y, p, z, q) -> array`` on one ensemble time slice.
    psi : callable
        ``y0 -> p0`` on the ensemble at time 0.
    terminal : callable
        Driver paths to ``xi`` (``W``-measurable).
    variant : {"A", "B"}
        ``"A"``: homotopy base ``(-k3 p, -k3 q, k2 y, k2 z, y0)``.
        ``"B"``: base ``(-C(Cp + Dq), -D(Cp + Dq), 0, 0, 0)``; the drift and
        diffusion see ``p`` and ``q`` only through ``C p`` and ``D q``.
    k2, k3 : float
        Homotopy constants of variant A.
    C, D : float
        Coupling scalars of variant B.
    offsets : dict
        Optional ``f0, g0, F0, G0`` (scalars or ``(N, n+1)`` arrays) and ``psi0``.
    declared : dict
        Optional declared constants (``k1..k4``, ``lambda1``, ``lambda2``,
        ``c1..c3``), checked against their sign constraints.
    """

    f: Callable
    g: Callable
    F: Callable
    G: Callable
    psi: Callable
    terminal: Callable = field(default_factory=lambda: constant_terminal(0.0))
    variant: str = "A"
    k2: float = 1.0
    k3: float = 1.0
    C: float = 1.0
    D: float = 0.0
    offsets: dict = field(default_factory=dict)
    declared: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in ("A", "B"):
            raise InvalidArgumentError(f"unknown variant {self.variant!r}; expected 'A' or 'B'")
        unknown = set(self.offsets) - {"f0", "g0", "F0", "G0", "psi0"}
        if unknown:
            raise InvalidArgumentError(f"unknown offsets: {sorted(unknown)}")
        if self.variant == "A" and (self.k2 < 0 or self.k3 < 0):
            raise InvalidArgumentError("homotopy constants k2, k3 must be nonnegative")
        bad = declared_violations(self.variant, self.declared)
        if bad:
            raise InvalidArgumentError("declared constants violate: " + ", ".join(bad))

    def coefficient(self, name: str) -> Callable:
        return {"f": self.f, "g": self.g, "F": self.F, "G": self.G}[name]

    def base(self, name: str, y, p, z, q):
        """Homotopy base coefficient at ``alpha = 0``."""
        if self.variant == "A":
            return {"f": -self.k3 * p, "g": -self.k3 * q, "F": self.k2 * y, "G": self.k2 * z}[name]
        mix = self.C * p + self.D * q
        return {"f": -self.C * mix, "g": -self.D * mix, "F": np.zeros_like(y), "G": np.zeros_like(y)}[name]

    def base_psi(self, y0):
        return np.asarray(y0, dtype=float).copy() if self.variant == "A" else np.zeros_like(y0)

    def offset(self, name: str, N: int, n: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.offsets.get(name, 0.0), dtype=float), (N, n + 1))


def declared_violations(variant: str, declared: dict) -> list:
    """Sign constraints violated by declared constants (only the ones present are checked)."""
    d, out = declared, []
    for name, value in d.items():
        if value < 0:
            out.append(f"{name} >= 0")
    if variant == "A":
        if "k2" in d and "k3" in d and not d["k2"] + d["k3"] > 0:
            out.append("k2 + k3 > 0")
        if "k3" in d and "k4" in d and not d["k3"] + d["k4"] > 0:
            out.append("k3 + k4 > 0")
    else:
        for name in ("c2", "c3"):
            if name in d and not d[name] > 0:
                out.append(f"{name} > 0")
    if "lambda1" in d and "lambda2" in d and not d["lambda1"] + d["lambda2"] < 1:
        out.append("lambda1 + lambda2 < 1")
    return out


@dataclass
class FbdsdeFields:
    """Solution fields, each ``(N, n+1)``.

    ``p_hat`` is the forward value entering the coefficients at each grid point
    and ``p`` the value after the drift update; they agree at ``t_0``. The
    conventions ``q_0 = 0`` and ``z_n = 0`` hold.
    """

    y: np.ndarray
    p_hat: np.ndarray
    z: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def copy(self) -> FbdsdeFields:
        return FbdsdeFields(*(a.copy() for a in (self.y, self.p_hat, self.z, self.q, self.p)))

    @classmethod
    def zeros(cls, N: int, n: int) -> FbdsdeFields:
        return cls(*(np.zeros((N, n + 1)) for _ in range(5)))

    def slice(self, i: int, rows=slice(None)):
        return self.y[rows, i], self.p_hat[rows, i], self.z[rows, i], self.q[rows, i]


def fields_distance(a: FbdsdeFields, b: FbdsdeFields, dt: float) -> float:
    """Ensemble L2 distance over all four fields plus the initial ``y`` gap."""
    sq = sum(((x - y) ** 2)[:, 1:].sum(axis=1) * dt for x, y in
             ((a.y, b.y), (a.p_hat, b.p_hat), (a.z, b.z), (a.q, b.q)))
    sq = sq + (a.y[:, 0] - b.y[:, 0]) ** 2
    return float(np.sqrt(np.mean(sq)))


def _norm(a: FbdsdeFields, dt: float) -> float:
    return fields_distance(a, FbdsdeFields.zeros(*_shape(a)), dt)


def _shape(a: FbdsdeFields):
    return a.y.shape[0], a.y.shape[1] - 1


# Homotopy system at one alpha ------------------------------------------------------

class HomotopySystem:
    """The system ``alpha * h + (1 - alpha) * base + forcing + offset`` for each coefficient."""

    def __init__(self, spec: FbdsdeSpec, alpha: float, paths: DriverPaths,
                 forcing: dict | None = None, psi_forcing=None):
        self.spec, self.alpha, self.paths = spec, float(alpha), paths
        N, n = paths.particle_count, paths.grid.n_steps
        self.forcing = {k: np.zeros((N, n + 1)) for k in COEFFICIENTS}
        self.forcing.update(forcing or {})
        self.psi_forcing = np.zeros(N) if psi_forcing is None else np.asarray(psi_forcing, dtype=float)
        self.offsets = {k: spec.offset(k + "0", N, n) for k in COEFFICIENTS}
        self.psi0 = np.broadcast_to(np.asarray(spec.offsets.get("psi0", 0.0), dtype=float), (N,))

    def value(self, name: str, i: int, y, p, z, q, rows=slice(None)) -> np.ndarray:
        t = self.paths.grid.points[i]
        out = self.forcing[name][rows, i] + self.offsets[name][rows, i]
        if self.alpha != 0.0:
            out = out + self.alpha * np.asarray(self.spec.coefficient(name)(t, y, p, z, q), dtype=float)
        if self.alpha != 1.0:
            out = out + (1.0 - self.alpha) * self.spec.base(name, y, p, z, q)
        return out

    def datum(self, y0: np.ndarray) -> np.ndarray:
        out = self.psi_forcing + self.psi0
        if self.alpha != 0.0:
            out = out + self.alpha * np.asarray(self.spec.psi(y0), dtype=float)
        if self.alpha != 1.0:
            out = out + (1.0 - self.alpha) * self.spec.base_psi(y0)
        return out

    @property
    def coupled(self) -> bool:
        spec = self.spec
        if self.alpha != 0.0:
            return True
        return spec.variant == "A" and spec.k2 * spec.k3 > 0


class _BackwardPart:
    """Backward coefficients with ``(p_hat, q)`` taken from a given iterate."""

    law_dependent = False

    def __init__(self, system: HomotopySystem, iterate: FbdsdeFields):
        self.system, self.iterate = system, iterate

    def terminal(self, paths):
        xi = np.asarray(self.system.spec.terminal(paths), dtype=float)
        if xi.shape != (paths.particle_count,):
            raise InvalidArgumentError(f"terminal datum must have shape ({paths.particle_count},)")
        return xi[:, None]

    def _eval(self, name, i, y, z, rows):
        p, q = self.iterate.p_hat[rows, i], self.iterate.q[rows, i]
        return self.system.value(name, i, y[:, 0], p, z[:, 0, 0], q, rows)

    def drift(self, i, y, z, frozen_y, frozen_z, rows):
        return self._eval("f", i, y, z, rows)[:, None]

    def diffusion(self, i, y, z, frozen_y, frozen_z, rows):
        return self._eval("g", i, y, z, rows)[:, None, None]


@dataclass(frozen=True)
class ContinuationConfig:
    """Settings of the continuation method and its inner solves.

    ``delta`` is the initial homotopy step, halved on failure down to
    ``delta_min``. ``damping`` is the relaxation weight of the inner
    alternation on coupled systems and ``acceleration`` its Anderson mixing
    depth (0 gives plain relaxation).
    """

    delta: float = 0.1
    delta_min: float = 1.0 / 1024
    tol: float = 1e-8
    max_picard: int = 60
    inner_tol: float = 1e-11
    max_inner: int = 2000
    damping: float = 0.5
    acceleration: int = 5
    solver: SolverConfig = field(default_factory=SolverConfig)
    exact_tree: bool = False

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise InvalidArgumentError("delta must lie in (0, 1]")
        if not 0 < self.delta_min <= self.delta:
            raise InvalidArgumentError("delta_min must lie in (0, delta]")
        if not 0 < self.damping <= 1:
            raise InvalidArgumentError("damping must lie in (0, 1]")
        if self.inner_tol >= self.tol:
            raise InvalidArgumentError("inner_tol must be smaller than tol")


@dataclass
class InnerResult:
    fields: FbdsdeFields
    status: str
    iterations: int
    displacements: list


class _Engine:
    """Backward and forward solves on Monte Carlo paths or on an enumerated tree."""

    def __init__(self, paths: DriverPaths, config: ContinuationConfig, bank: OperatorBank | None = None):
        self.paths, self.config = paths, config
        self.tree = config.exact_tree
        if not self.tree:
            reg = config.solver.regression
            self.bank = bank if bank is not None and bank.paths is paths and bank.config == reg \
                else OperatorBank(paths, reg)

    def backward(self, coeffs):
        if self.tree:
            sol = solve_on_tree(coeffs, None, self.paths)
        else:
            sol = solve_mf_bdsde(coeffs, None, self.paths, self.config.solver, bank=self.bank)
        return sol.ys, sol.zs

    def forward(self, system: HomotopySystem, y, z, datum):
        def step(i, p_hat, q, rows=slice(None)):
            args = (y[rows, i], p_hat, z[rows, i], q)
            return system.value("F", i, *args, rows), system.value("G", i, *args, rows)

        if self.tree:
            return march_forward_on_tree(self.paths, datum, step)
        return march_forward(self.paths, self.bank, datum, step)


def solve_system(system: HomotopySystem, engine: _Engine, initial: FbdsdeFields | None = None
                 ) -> InnerResult:
    """Solve one homotopy system by alternating backward and forward solves.

    The backward solve uses the current ``(p_hat, q)``; the forward solve uses
    the new ``(y, z)``. On coupled systems the ``(p_hat, q)`` update is relaxed
    with weight ``damping`` and Anderson-mixed; the weight is halved and the
    mixing history cleared whenever the displacement grows.
    """
    config, paths = engine.config, engine.paths
    N, n, dt = paths.particle_count, paths.grid.n_steps, paths.grid.dt
    it = initial.copy() if initial is not None else FbdsdeFields.zeros(N, n)
    omega = config.damping if system.coupled else 1.0
    displacements, status = [], "max-iterations"
    xs, rs = [], []
    for _ in range(config.max_inner):
        y, z = engine.backward(_BackwardPart(system, it))
        fwd = engine.forward(system, y, z, system.datum(y[:, 0]))
        new = FbdsdeFields(y, fwd.p_hat, z, fwd.q, fwd.p)
        disp = fields_distance(new, it, dt)
        if not math.isfinite(disp):
            status = "diverged"
            break
        displacements.append(disp)
        if disp <= config.inner_tol * (1.0 + _norm(new, dt)):
            it, status = new, "converged"
            break
        if len(displacements) > 1 and disp > displacements[-2]:
            omega = max(omega * 0.5, 1.0 / 64)
            xs, rs = [], []
        x = np.concatenate([it.p_hat.ravel(), it.q.ravel(), it.p.ravel()])
        r = np.concatenate([new.p_hat.ravel(), new.q.ravel(), new.p.ravel()]) - x
        x_next = _anderson(xs, rs, x, r, omega, config.acceleration)
        size = it.p_hat.size
        it = FbdsdeFields(y, x_next[:size].reshape(it.p_hat.shape), z,
                          x_next[size:2 * size].reshape(it.q.shape), x_next[2 * size:].reshape(it.p.shape))
    return InnerResult(it, status, len(displacements), displacements)


def _anderson(xs: list, rs: list, x: np.ndarray, r: np.ndarray, omega: float, depth: int) -> np.ndarray:
    """Relaxed fixed-point step with Anderson mixing over the last ``depth`` iterates."""
    xs.append(x)
    rs.append(r)
    if depth <= 0 or len(xs) < 2:
        return x + omega * r
    del xs[:-(depth + 1)], rs[:-(depth + 1)]
    dX = np.stack([xs[k + 1] - xs[k] for k in range(len(xs) - 1)], axis=1)
    dR = np.stack([rs[k + 1] - rs[k] for k in range(len(rs) - 1)], axis=1)
    gamma = np.linalg.lstsq(dR, r, rcond=None)[0]
    return x + omega * r - (dX + omega * dR) @ gamma


def solve_alpha0(spec: FbdsdeSpec, paths: DriverPaths, config: ContinuationConfig | None = None,
                 initial: FbdsdeFields | None = None) -> InnerResult:
    """Solve the base system (``alpha = 0``) with the spec's offsets and terminal datum."""
    config = config or ContinuationConfig()
    return solve_system(HomotopySystem(spec, 0.0, paths), _Engine(paths, config), initial)


def homotopy_forcing(spec: FbdsdeSpec, delta: float, bar: FbdsdeFields, paths: DriverPaths):
    """``delta * (h - base)`` at the input iterate, per coefficient, and for ``Psi``."""
    N, n = paths.particle_count, paths.grid.n_steps
    forcing = {k: np.zeros((N, n + 1)) for k in COEFFICIENTS}
    if delta == 0.0:
        return forcing, np.zeros(N)
    for i in range(1, n + 1):
        t = paths.grid.points[i]
        y, p, z, q = bar.slice(i)
        for name in COEFFICIENTS:
            forcing[name][:, i] = delta * (np.asarray(spec.coefficient(name)(t, y, p, z, q), dtype=float)
                                           - spec.base(name, y, p, z, q))
    y0 = bar.y[:, 0]
    return forcing, delta * (np.asarray(spec.psi(y0), dtype=float) - spec.base_psi(y0))


def contraction_step(spec: FbdsdeSpec, alpha0: float, delta: float, bar: FbdsdeFields, paths: DriverPaths,
                     config: ContinuationConfig | None = None, engine: _Engine | None = None,
                     initial: FbdsdeFields | None = None) -> InnerResult:
    """Apply the continuation map: solve the ``alpha0`` system forced by ``delta`` terms at ``bar``."""
    if not 0 <= alpha0 <= 1 or delta < 0 or alpha0 + delta > 1 + 1e-12:
        raise InvalidArgumentError("need 0 <= alpha0, delta >= 0 and alpha0 + delta <= 1")
    config = config or ContinuationConfig()
    engine = engine or _Engine(paths, config)
    forcing, psi_forcing = homotopy_forcing(spec, delta, bar, paths)
    system = HomotopySystem(spec, alpha0, paths, forcing, psi_forcing)
    return solve_system(system, engine, initial if initial is not None else bar)


@dataclass
class ContinuationState:
    """Trace of a continuation run.

    ``alpha`` never decreases across accepted steps; it ends at 1 on success.
    """

    alpha: float = 0.0
    delta: float = 0.1
    accepted_alphas: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    picard_displacements: list = field(default_factory=list)
    retries: int = 0
    status: str = "running"
    inner_failures: int = 0

    @property
    def max_contraction_ratio(self) -> float:
        flat = [r for step in self.contraction_ratios for r in step]
        return max(flat) if flat else 0.0

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "delta": self.delta, "accepted_alphas": self.accepted_alphas,
                "deltas": self.deltas, "contraction_ratios": self.contraction_ratios,
                "max_contraction_ratio": self.max_contraction_ratio,
                "picard_displacements": self.picard_displacements, "retries": self.retries,
                "status": self.status}


@dataclass
class ContinuationResult:
    fields: FbdsdeFields
    state: ContinuationState
    residuals: dict

    @property
    def converged(self) -> bool:
        return self.state.status == "converged"


def continuation_solve(spec: FbdsdeSpec, paths: DriverPaths, config: ContinuationConfig | None = None,
                       initial: FbdsdeFields | None = None, bank: OperatorBank | None = None
                       ) -> ContinuationResult:
    """Solve ``spec`` by continuation from ``alpha = 0`` to ``alpha = 1``.

    ``initial`` seeds the base solve and the first Picard iteration (used by
    uniqueness probes). A Picard sequence is accepted when its displacement
    falls below ``tol`` with every measured ratio of successive displacements
    below one; otherwise ``delta`` is halved and the step retried.
    """
    config = config or ContinuationConfig()
    engine = _Engine(paths, config, bank)
    dt = paths.grid.dt
    state = ContinuationState(delta=config.delta)
    base = solve_system(HomotopySystem(spec, 0.0, paths), engine, initial)
    if base.status != "converged":
        state.status = f"base-solve-{base.status}"
        return ContinuationResult(base.fields, state, {})
    current, delta, first = base.fields, config.delta, True
    floor = 100.0 * config.inner_tol
    while state.alpha < 1.0 - 1e-12:
        step = min(delta, 1.0 - state.alpha)
        bar = initial.copy() if (first and initial is not None) else current
        ratios, disps, ok = [], [], False
        for _ in range(config.max_picard):
            inner = contraction_step(spec, state.alpha, step, bar, paths, config, engine)
            if inner.status != "converged":
                state.inner_failures += 1
                break
            d = fields_distance(inner.fields, bar, dt)
            if disps and disps[-1] > floor * (1.0 + _norm(bar, dt)):
                ratios.append(d / disps[-1])
                if ratios[-1] >= 1.0:
                    break
            disps.append(d)
            bar = inner.fields
            if d <= config.tol * (1.0 + _norm(bar, dt)):
                ok = True
                break
        if ok:
            # snap to the endpoint so accumulated rounding cannot leave alpha just below 1
            state.alpha = 1.0 if state.alpha + step >= 1.0 - 1e-12 else state.alpha + step
            state.accepted_alphas.append(state.alpha)
            state.deltas.append(step)
            state.contraction_ratios.append(ratios)
            state.picard_displacements.append(disps)
            current, first = bar, False
            continue
        state.retries += 1
        delta = step / 2
        if delta < config.delta_min:
            state.status = "delta-underflow"
            state.delta = delta
            return ContinuationResult(current, state, {})
    state.delta = delta
    state.status = "converged"
    return ContinuationResult(current, state, fbdsde_residuals(spec, current, paths))


def coefficient_fields(spec: FbdsdeSpec, fields: FbdsdeFields, paths: DriverPaths) -> dict:
    """Full-system coefficients along ``fields`` (``G_0 = 0`` by convention)."""
    system = HomotopySystem(spec, 1.0, paths)
    N, n = paths.particle_count, paths.grid.n_steps
    out = {k: np.zeros((N, n + 1)) for k in COEFFICIENTS}
    for i in range(1, n + 1):
        args = fields.slice(i)
        for name in COEFFICIENTS:
            out[name][:, i] = system.value(name, i, *args)
    return out


def fbdsde_residuals(spec: FbdsdeSpec, fields: FbdsdeFields, paths: DriverPaths) -> dict:
    """Residuals of the backward and forward integrated identities.

    ``*_rms`` is the largest per-step RMS (zero up to roundoff on a tree);
    ``*_score`` is ``|mean| / standard error`` of the full-horizon residual
    (statistically small on Monte Carlo paths, where the regression remainder
    is pathwise nonzero).
    """
    c = coefficient_fields(spec, fields, paths)
    back = backward_residuals(fields.y, fields.z, c["f"][:, 1:], c["g"][:, 1:], paths)
    fwd = forward_residuals(fields.p, c["F"][:, 1:], c["G"][:, :-1], fields.q[:, 1:], paths)
    datum = HomotopySystem(spec, 1.0, paths).datum(fields.y[:, 0])
    rms = lambda r: float(np.max(np.sqrt(np.mean(np.sum(r**2, axis=2), axis=0))))
    return {"backward_rms": rms(back), "forward_rms": rms(fwd),
            "backward_score": mean_residual_score(back, 0),
            "forward_score": mean_residual_score(fwd, fwd.shape[1] - 1),
            "initial": float(np.sqrt(np.mean((fields.p[:, 0] - datum) ** 2)))}


def uniqueness_gap(a: FbdsdeFields, b: FbdsdeFields) -> float:
    """Largest over fields and grid points of the W2 distance between the two ensembles' marginals."""
    worst = 0.0
    for x, y in ((a.y, b.y), (a.p_hat, b.p_hat), (a.z, b.z), (a.q, b.q)):
        for i in range(x.shape[1]):
            a_law, b_law = EmpiricalLaw.from_fields(v=x[:, i]), EmpiricalLaw.from_fields(v=y[:, i])
            worst = max(worst, wasserstein2(a_law, b_law))
    return worst


# Assumption probes --------------------------------------------------------------

@dataclass
class ProbeReport:
    """Outcome of the sampled assumption probes.

    Statuses are ``"pass"``, ``"fail"`` or ``"n/a"``. Passing is evidence from
    finitely many samples, not a proof.
    """

    A1: str
    A2: str
    B1: str
    B2: str
    constants: dict
    messages: list

    @property
    def monotone(self) -> bool:
        return self.A2 == "pass" or self.B1 == "pass"

    def to_dict(self) -> dict:
        return {"A1": self.A1, "A2": self.A2, "B1": self.B1, "B2": self.B2,
                "constants": self.constants, "messages": self.messages}


def _operator(spec: FbdsdeSpec, t, zeta):
    y, p, z, q = zeta
    return np.stack([-spec.F(t, y, p, z, q), spec.f(t, y, p, z, q), -spec.G(t, y, p, z, q),
                     spec.g(t, y, p, z, q)])


def _pairing(spec: FbdsdeSpec, t, zeta, delta) -> float:
    diff = _operator(spec, t, zeta + delta) - _operator(spec, t, zeta)
    return float(np.mean(np.sum(diff * delta, axis=0)))


def _patterns(rng: np.random.Generator, M: int) -> dict:
    noise = rng.normal(size=M)
    noise = (noise - noise.mean()) / noise.std()
    return {"common": np.ones(M), "idiosyncratic": noise}


def _quadratic_form(spec, t, zeta, pattern) -> np.ndarray:
    """Symmetric matrix of ``v -> E<A(zeta + v pattern) - A(zeta), v pattern>`` by polarization."""
    e = np.eye(4)
    single = [_pairing(spec, t, zeta, np.outer(e[a], pattern)) for a in range(4)]
    M = np.diag(single)
    for a in range(4):
        for b in range(a + 1, 4):
            both = _pairing(spec, t, zeta, np.outer(e[a] + e[b], pattern))
            M[a, b] = M[b, a] = 0.5 * (both - single[a] - single[b])
    return M / np.mean(pattern**2)


def _max_weight(forms: list, extra: np.ndarray, tol: float, cap: float = 1e3) -> float:
    """Largest ``k`` in ``[0, cap]`` with ``M + k * extra`` negative semidefinite for every ``M``."""
    def ok(k):
        return all(np.linalg.eigvalsh(M + k * extra).max() <= tol * (1.0 + np.abs(M).max()) for M in forms)
    if not ok(0.0):
        return -1.0
    lo, hi = 0.0, cap
    if ok(hi):
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def _lambda_bound(spec, name, which, rng, M, samples, power) -> float:
    """Smallest ``lambda1 + lambda2`` fitting ``|Delta h|^s <= lambda1 |Delta x|^s + lambda2 E|Delta x|^s``."""
    fn = spec.coefficient(name)
    idx = {"y": 0, "p": 1, "z": 2, "q": 3}[which]
    rows_a, rows_b = [], []
    for _ in range(samples):
        zeta = rng.normal(size=(4, M)) * rng.uniform(0.5, 2.0)
        kind = rng.integers(3)
        dx = rng.normal(size=M) if kind == 0 else (np.full(M, rng.normal()) if kind == 1
                                                   else rng.normal() + 0.3 * rng.normal(size=M))
        moved = zeta.copy()
        moved[idx] += dx
        dh = np.abs(fn(0.0, *moved) - fn(0.0, *zeta)) ** power
        ax = np.abs(dx) ** power
        for j in range(M):
            rows_a.append([-ax[j], -ax.mean()])
            rows_b.append(-dh[j])
    res = linprog(c=[1.0, 1.0], A_ub=np.array(rows_a), b_ub=np.array(rows_b) + 1e-12,
                  bounds=[(0, None), (0, None)], method="highs")
    return float(res.fun) if res.status == 0 else math.inf


def probe_assumptions(spec: FbdsdeSpec, samples: int = 24, size: int = 64, seed: int = 0,
                      t: float = 0.5, tol: float = 1e-9) -> ProbeReport:
    """Sample the Lipschitz and monotonicity conditions of ``spec``.

    Monotonicity is probed through the quadratic forms of
    ``E<A(zeta') - A(zeta), zeta' - zeta>`` along common and idiosyncratic
    perturbation patterns (recovered by polarization), then validated on
    random large-amplitude pairs.
    """
    rng = np.random.default_rng(seed)
    messages, constants = [], {}
    forms, pairs, lip = [], [], 0.0
    for _ in range(samples):
        zeta = rng.normal(size=(4, size)) * rng.uniform(0.5, 2.0)
        for pattern in _patterns(rng, size).values():
            forms.append(_quadratic_form(spec, t, zeta, pattern))
        delta = rng.normal(size=(4, size)) * rng.uniform(0.1, 2.0)
        delta = delta * (rng.random(size=(4, 1)) < 0.7) + rng.normal(size=(4, 1)) * rng.uniform(0, 1)
        moved = zeta + delta
        dA = _operator(spec, t, moved) - _operator(spec, t, zeta)
        w2 = float(np.sqrt(np.mean(np.sum(delta**2, axis=0))))
        lip = max(lip, float(np.max(np.linalg.norm(dA, axis=0) / (np.linalg.norm(delta, axis=0) + w2))))
        pairs.append((float(np.mean(np.sum(dA * delta, axis=0))), delta))
    constants["k1_estimate"] = lip
    lip_ok = math.isfinite(lip)
    psi_ratio, psi_lip = math.inf, 0.0
    for _ in range(samples):
        y0 = rng.normal(size=size) * rng.uniform(0.5, 2.0)
        dy = rng.normal(size=size) if rng.random() < 0.5 else np.full(size, rng.normal())
        dpsi = np.asarray(spec.psi(y0 + dy), dtype=float) - np.asarray(spec.psi(y0), dtype=float)
        psi_ratio = min(psi_ratio, float(np.mean(dpsi * dy) / np.mean(dy**2)))
        psi_lip = max(psi_lip, float(np.max(np.abs(dpsi) / (np.abs(dy) + np.sqrt(np.mean(dy**2))))))
    constants["k4_estimate"] = psi_ratio
    constants["psi_lipschitz"] = psi_lip
    lip_ok = lip_ok and math.isfinite(psi_lip)

    yz, pq = np.diag([1.0, 0.0, 1.0, 0.0]), np.diag([0.0, 1.0, 0.0, 1.0])
    k2 = _max_weight(forms, yz, tol)
    k3 = _max_weight(forms, pq, tol)
    constants.update(k2_estimate=k2, k3_estimate=k3)
    psi_monotone = psi_ratio >= -tol
    k4 = max(psi_ratio, 0.0)
    eps = 1e-6
    A2 = "fail"
    if k2 < 0 or k3 < 0:
        messages.append("A2: the pairing is not nonpositive on sampled directions")
    elif not psi_monotone:
        messages.append("A2: Psi is not monotone on sampled directions")
    elif not (k2 > eps or k3 > eps):
        messages.append("A2: no k2, k3 >= 0 with k2 + k3 > 0 fits the samples")
    elif not (k3 > eps or k4 > eps):
        messages.append("A2: no k3, k4 with k3 + k4 > 0 fits the samples")
    else:
        A2 = "pass"
        if k2 <= eps or k3 <= eps:
            which = ("g", "z") if k2 <= eps else ("G", "q")
            lam = _lambda_bound(spec, which[0], which[1], rng, size, samples, power=1)
            constants["lambda_sum_estimate"] = lam
            if not lam < 1:
                A2 = "fail"
                messages.append(f"A2: lambda1 + lambda2 = {lam:.4g} >= 1 for {which[0]} in {which[1]}")
    if A2 == "pass":
        for value, delta in pairs:
            a = np.mean(delta[0] ** 2 + delta[2] ** 2)
            b = np.mean(delta[1] ** 2 + delta[3] ** 2)
            if value > -0.5 * (k2 * a + k3 * b) + tol * (1 + abs(value)):
                A2 = "fail"
                messages.append("A2: a random pair violates the estimated constants")
                break

    B1 = B2 = "n/a"
    if spec.variant == "B":
        cd = np.zeros(4)
        cd[1], cd[3] = spec.C, spec.D
        c2 = _max_weight(forms, np.outer(cd, cd), tol)
        c1 = _max_weight([M + 0.5 * c2 * np.outer(cd, cd) for M in forms], yz, tol) if c2 > 0 else -1.0
        constants.update(c1_estimate=c1, c2_estimate=c2)
        B1 = "pass" if c2 > eps and psi_monotone else "fail"
        if B1 == "fail":
            messages.append("B1: no c2 > 0 fits the samples" if psi_monotone
                            else "B1: Psi is not monotone on sampled directions")
        lam_g = _lambda_bound(spec, "g", "z", rng, size, samples, power=2)
        lam_G = _lambda_bound(spec, "G", "q", rng, size, samples, power=2)
        constants.update(lambda_sum_g=lam_g, lambda_sum_G=lam_G)
        B2 = "pass" if lip_ok and lam_g < 1 and lam_G < 1 else "fail"
        if B2 == "fail":
            messages.append(f"B2: lambda1 + lambda2 estimates {lam_g:.4g} (g in z), {lam_G:.4g} (G in q)")
    return ProbeReport("pass" if lip_ok else "fail", A2, B1, B2, constants, messages)


# Linear-quadratic Hamiltonian systems -----------------------------------------------

def lq_control(c: LqCoefficients, p, q, mean_p=None, mean_q=None) -> np.ndarray:
    """Pointwise optimal control from the stationarity relation of the LQ Hamiltonian."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    mp = p.mean() if mean_p is None else mean_p
    mq = q.mean() if mean_q is None else mean_q
    H = c.h3 + c.hb3
    a = (c.h3 * c.fb3 - c.hb3 * c.f3) / H
    b = (c.h3 * c.gb3 - c.hb3 * c.g3) / H
    return -(c.f3 * p + a * mp + c.g3 * q + b * mq) / c.h3


def lq_mean_control(c: LqCoefficients, mean_p: float, mean_q: float) -> float:
    """Mean of the optimal control obtained by averaging the stationarity relation."""
    return -((c.f3 + c.fb3) * mean_p + (c.g3 + c.gb3) * mean_q) / (c.h3 + c.hb3)


def lq_hamiltonian_spec(c: LqCoefficients, terminal=None, k2: float = 1.0, k3: float = 1.0) -> FbdsdeSpec:
    """The LQ Hamiltonian system as an :class:`FbdsdeSpec`.

    Without mean-control terms this is the B-form system with
    ``C = f3 / sqrt(h3)`` and ``D = g3 / sqrt(h3)``; with them, the control is
    substituted in full and the A-form homotopy (``k2``, ``k3``) is used.
    """
    if not c.h3 > 0:
        raise InvalidArgumentError("LQ constraint violated: h3 > 0")
    if c.uses_mean_control and not c.hb3 > 0:
        raise InvalidArgumentError("LQ constraint violated: hb3 > 0 when mean-control terms are present")

    def control(p, q):
        return lq_control(c, p, q), lq_mean_control(c, p.mean(), q.mean())

    def f(t, y, p, z, q):
        u, eu = control(p, q)
        return c.f1 * y + c.f2 * z + c.f3 * u + c.fb1 * y.mean() + c.fb2 * z.mean() + c.fb3 * eu

    def g(t, y, p, z, q):
        u, eu = control(p, q)
        return c.g1 * y + c.g2 * z + c.g3 * u + c.gb1 * y.mean() + c.gb2 * z.mean() + c.gb3 * eu

    def F(t, y, p, z, q):
        return (c.f1 * p + c.fb1 * p.mean() + c.g1 * q + c.gb1 * q.mean() + c.h1 * y + c.hb1 * y.mean())

    def G(t, y, p, z, q):
        return (c.f2 * p + c.fb2 * p.mean() + c.g2 * q + c.gb2 * q.mean() + c.h2 * z + c.hb2 * z.mean())

    def psi(y0):
        return c.phi * y0 + c.phib * np.mean(y0)

    offsets = {"f0": c.f0, "g0": c.g0}
    terminal = terminal if terminal is not None else constant_terminal(0.0)
    if c.uses_mean_control:
        return FbdsdeSpec(f, g, F, G, psi, terminal, "A", k2=k2, k3=k3, offsets=offsets)
    root = math.sqrt(c.h3)
    return FbdsdeSpec(f, g, F, G, psi, terminal, "B", C=c.f3 / root, D=c.g3 / root, offsets=offsets)


@dataclass
class LqHamiltonianResult:
    """Solved LQ Hamiltonian system with the closed-form control.

    ``u`` has shape ``(N, n+1)``; ``mean_control_gap`` is the largest gap
    between the ensemble mean of ``u`` and the averaged stationarity relation.
    """

    fields: FbdsdeFields
    u: np.ndarray
    state: ContinuationState
    residuals: dict
    mean_control_gap: float

    @property
    def converged(self) -> bool:
        return self.state.status == "converged"


def solve_lq_hamiltonian_system(c: LqCoefficients, paths: DriverPaths, terminal=None,
                                config: ContinuationConfig | None = None,
                                bank: OperatorBank | None = None) -> LqHamiltonianResult:
    """Solve the LQ Hamiltonian system by continuation and return the closed-form control."""
    bad = [v for v in c.violations() if not (v == "h3 > 0" and c.h3 > 0)]
    if bad:
        raise InvalidArgumentError("LQ constraint violated: " + ", ".join(bad))
    spec = lq_hamiltonian_spec(c, terminal)
    result = continuation_solve(spec, paths, config, bank=bank)
    fields = result.fields
    u = np.empty_like(fields.y)
    gap = 0.0
    for i in range(fields.y.shape[1]):
        u[:, i] = lq_control(c, fields.p_hat[:, i], fields.q[:, i])
        expected = lq_mean_control(c, fields.p_hat[:, i].mean(), fields.q[:, i].mean())
        gap = max(gap, abs(float(u[:, i].mean()) - expected))
    return LqHamiltonianResult(fields, u, result.state, result.residuals, gap)


# Shipped instances -------------------------------------------------------------

def monotone_spec(terminal=None) -> FbdsdeSpec:
    """A nonlinear mean-field system satisfying the monotonicity condition with ``k2, k3 > 0``."""
    def f(t, y, p, z, q):
        return -p - 0.1 * p.mean() + 0.2 * np.tanh(y)

    def g(t, y, p, z, q):
        return -q + 0.1 * z

    def F(t, y, p, z, q):
        return y + 0.1 * y.mean()

    def G(t, y, p, z, q):
        return z

    def psi(y0):
        return y0 + 0.2 * np.mean(y0)

    return FbdsdeSpec(f, g, F, G, psi, terminal or affine_terminal(1.0, 0.5), "A", k2=1.0, k3=1.0)


def alpha0_spec(k2: float, k3: float, terminal=None, offsets: dict | None = None) -> FbdsdeSpec:
    """A spec whose target equals its own base system."""
    def f(t, y, p, z, q):
        return -k3 * p

    def g(t, y, p, z, q):
        return -k3 * q

    def F(t, y, p, z, q):
        return k2 * y

    def G(t, y, p, z, q):
        return k2 * z

    return FbdsdeSpec(f, g, F, G, lambda y0: np.asarray(y0, dtype=float).copy(),
                      terminal or constant_terminal(0.0), "A", k2=k2, k3=k3, offsets=offsets or {})


def tree_config(config: ContinuationConfig | None = None) -> ContinuationConfig:
    """Exact-tree variant of ``config`` (node-by-node solves)."""
    config = config or ContinuationConfig()
    return replace(config, exact_tree=True,
                   solver=replace(config.solver, regression=RegressionConfig(mode="tree-exact")))
