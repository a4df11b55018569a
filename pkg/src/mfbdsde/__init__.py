"""Particle solvers for mean-field backward doubly stochastic control problems.

Modules: ``drivers`` (Brownian paths and Bernoulli trees), ``law`` (empirical
laws and interaction terms), ``bdsde`` (state solver), ``adjoint``
(Hamiltonian and adjoint solver), ``control`` (cost, gradients, optimizer),
``fbdsde`` (coupled systems by continuation) and ``cli``.
"""
from .bdsde import RegressionConfig, SolverConfig, solve_mf_bdsde
from .drivers import build_grid, sample_paths
from .problems import Box, LqCoefficients, ProblemSpec, lq_problem

__version__ = "0.1.0"

__all__ = [
           "Box",
           "LqCoefficients",
           "ProblemSpec",
           "RegressionConfig",
           "SolverConfig",
           "__version__",
           "build_grid",
           "lq_problem",
           "sample_paths",
           "solve_mf_bdsde",
]
