"""Tree-oracle comparisons: each solver in tree-exact mode against node-by-node induction."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adjoint import adjoint_on_tree, solve_adjoint
from .bdsde import RegressionConfig, SolverConfig, solve_mf_bdsde, solve_on_tree
from .control import solve_variational
from .drivers import build_grid, tree_paths
from .fbdsde import ContinuationConfig, alpha0_spec, solve_alpha0, tree_config
from .instances import SHIPPED_LQ, mean_field_linear_problem, shipped_terminal
from .law import LinearTerm, QuadraticInitial, QuadraticTerm
from .problems import ProblemSpec, affine_terminal, lq_problem

TREE_TOL = 1e-12


@dataclass
class OracleRow:
    name: str
    max_abs_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_diff <= self.tolerance)


def _gap(*pairs) -> float:
    return float(max(np.max(np.abs(np.asarray(a) - np.asarray(b))) for a, b in pairs))


def tree_exact_config() -> SolverConfig:
    return SolverConfig(RegressionConfig(mode="tree-exact"), picard_tol=1e-15, max_picard=200)


def oracle_rows(n_steps: int = 2, horizon: float = 1.0, tol: float = TREE_TOL) -> list:
    """Compare every shipped tree instance; returns one :class:`OracleRow` each."""
    paths = tree_paths(build_grid(horizon, n_steps), (1, 1), 2**20)
    cfg = tree_exact_config()
    w = paths.w_values()[..., 0]
    tails = paths.b_tails()[..., 0]
    rows = []

    plain = ProblemSpec(LinearTerm((0.5, 0.3, 1.0)), LinearTerm((0.2, 0.1, 0.4)), QuadraticTerm(),
                        QuadraticInitial(), affine_terminal(1.0, 0.5))
    u = 0.3 + 0.2 * w
    a, b = solve_mf_bdsde(plain, u, paths, cfg), solve_on_tree(plain, u, paths)
    rows.append(OracleRow("plain", _gap((a.ys, b.ys), (a.zs, b.zs)), tol))

    mfl = mean_field_linear_problem()
    a, b = solve_mf_bdsde(mfl, None, paths, cfg), solve_on_tree(mfl, None, paths, tol=1e-15)
    rows.append(OracleRow("mean-field linear", _gap((a.ys, b.ys), (a.zs, b.zs)), tol))

    lq = lq_problem(SHIPPED_LQ, terminal=shipped_terminal())
    a, b = solve_mf_bdsde(lq, u, paths, cfg), solve_on_tree(lq, u, paths, tol=1e-15)
    rows.append(OracleRow("lq", _gap((a.ys, b.ys), (a.zs, b.zs)), tol))

    v = 0.5 - 0.2 * w + 0.3 * tails
    va = solve_variational(lq, a, u, v, config=cfg)
    vb = solve_variational(lq, a, u, v, exact_tree=True)
    rows.append(OracleRow("variational", _gap((va.K, vb.K), (va.L, vb.L)), tol))

    adj_a, adj_b = solve_adjoint(lq, a, u, config=cfg), adjoint_on_tree(lq, a, u)
    rows.append(OracleRow("adjoint", _gap((adj_a.p, adj_b.p), (adj_a.q, adj_b.q),
                                          (adj_a.gradient, adj_b.gradient)), tol))

    spec = alpha0_spec(0.5, 0.7, terminal=affine_terminal(1.0, 0.5),
                       offsets={"f0": 0.3, "g0": -0.1, "F0": -0.2, "G0": 0.1, "psi0": 0.1})
    base = ContinuationConfig(inner_tol=1e-15, tol=1e-13)
    exact = tree_config(base)
    engine_cfg = replace(base, solver=exact.solver)
    ea, eb = solve_alpha0(spec, paths, engine_cfg), solve_alpha0(spec, paths, exact)
    fa, fb = ea.fields, eb.fields
    rows.append(OracleRow("alpha0 system", _gap((fa.y, fb.y), (fa.z, fb.z), (fa.p, fb.p), (fa.q, fb.q)), tol))
    return rows
