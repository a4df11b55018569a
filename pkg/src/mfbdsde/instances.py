"""Shipped problem instances used by the CLI, the scripts and the tests."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .law import KernelTerm, LinearTerm, QuadraticInitial, QuadraticTerm, ScalarTerm
from .problems import Box, LqCoefficients, ProblemSpec, affine_terminal, lq_problem

# LQ instance without mean-control terms; h2 = 0 so the pairing is not
# negative in z and only the weaker (C, D) monotonicity holds.
SHIPPED_LQ = LqCoefficients(f1=0.2, f2=0.1, f3=1.0, fb1=0.1, fb2=0.05,
                            g1=0.1, g2=0.2, g3=0.5, gb1=0.05, gb2=0.1,
                            h1=1.0, h2=0.0, h3=1.0, hb1=0.5, hb2=0.0,
                            phi=1.0, phib=0.5)

# Same instance with the mean of the control entering drift, diffusion and cost.
MEAN_CONTROL_TERMS = {"fb3": 0.5, "gb3": 0.3, "hb3": 0.5}
MEAN_CONTROL_LQ = replace(SHIPPED_LQ, **MEAN_CONTROL_TERMS)

TERMINAL_CONST, TERMINAL_SLOPE = 1.0, 0.5


def shipped_terminal():
    return affine_terminal(TERMINAL_CONST, TERMINAL_SLOPE)


def shipped_lq_problem(control_set: Box | None = None) -> ProblemSpec:
    """The shipped LQ problem with ``xi = 1 + 0.5 W_T``."""
    return lq_problem(SHIPPED_LQ, terminal=shipped_terminal(), control_set=control_set)


def scalar_interaction_problem(control_set: Box | None = None) -> ProblemSpec:
    """Nonlinear-in-control problem whose drift depends on the law through ``E[y]``.

    ``f = 0.3 y + 0.2 z + sin(u) + 0.2 tanh(E[y])``, ``g = 0.1 y + 0.2 z + 0.3 u``,
    ``h = (y^2 + u^2)/2 + E[y]^2/4`` and ``Phi = y0^2/2``.
    """
    def f_outer(t, y, z, u, r):
        return 0.3 * y + 0.2 * z + np.sin(u) + 0.2 * np.tanh(r)

    def f_grad(t, y, z, u, r):
        return 0.3, 0.2, np.cos(u), 0.2 / np.cosh(r) ** 2

    def h_outer(t, y, z, u, r):
        return 0.5 * (y**2 + u**2) + 0.25 * r**2

    def h_grad(t, y, z, u, r):
        return y, np.zeros_like(y), u, 0.5 * r

    def first(y, z, u):
        return y

    def first_grad(y, z, u):
        return np.ones_like(y), np.zeros_like(y), np.zeros_like(y)

    return ProblemSpec(
        drift=ScalarTerm(f_outer, f_grad, first, first_grad),
        diffusion=LinearTerm((0.1, 0.2, 0.3)),
        running_cost=ScalarTerm(h_outer, h_grad, first, first_grad),
        initial_cost=QuadraticInitial(1.0, 0.0),
        terminal=shipped_terminal(),
        control_set=control_set or Box(),
    )


def first_order_problem(control_set: Box | None = None) -> ProblemSpec:
    """Drift with a pairwise interaction ``E~[0.2 tanh(y - Y~)]``; LQ-type cost."""
    def kernel(t, y, z, u, y2, z2, u2):
        return 0.3 * y + u + 0.2 * np.tanh(y - y2)

    def kernel_grad(t, y, z, u, y2, z2, u2):
        s = 0.2 / np.cosh(y - y2) ** 2
        zero = np.zeros_like(s)
        return 0.3 + s, zero, np.ones_like(s), -s, zero, zero

    return ProblemSpec(
        drift=KernelTerm(kernel, kernel_grad),
        diffusion=LinearTerm((0.1, 0.2, 0.3)),
        running_cost=QuadraticTerm((1.0, 0.0, 1.0), (0.5, 0.0, 0.0)),
        initial_cost=QuadraticInitial(1.0, 0.5),
        terminal=shipped_terminal(),
        control_set=control_set or Box(),
    )


def mean_field_linear_problem(a: float = 1.0, abar: float = 0.5, xi: float = 1.0) -> ProblemSpec:
    """``f = a y + abar E[y]``, ``g = 0``, ``xi`` constant (no control)."""
    from .problems import constant_terminal
    return ProblemSpec(LinearTerm((a, 0.0, 0.0), (abar, 0.0, 0.0)), LinearTerm(),
                       QuadraticTerm(), QuadraticInitial(), constant_terminal(xi))
