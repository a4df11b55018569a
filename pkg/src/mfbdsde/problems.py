"""Scalar control problems built from structured coefficients.

A problem bundles the drift ``f``, the backward diffusion ``g``, the running
cost ``h``, the initial cost ``Phi``, a terminal datum and a box of admissible
control values. All of ``y``, ``z``, ``u`` and both drivers are scalar here.
"""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, fields

import numpy as np

from .drivers import DriverPaths
from .errors import InvalidArgumentError
from .law import Ensemble, InteractionSpec, LinearTerm, QuadraticInitial, QuadraticTerm


@dataclass(frozen=True)
class Box:
    """Closed box ``[lower, upper]`` of admissible control values (bounds may be infinite)."""

    lower: float = -np.inf
    upper: float = np.inf

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise InvalidArgumentError(f"box bounds out of order: {self.lower} > {self.upper}")

    def project(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def contains(self, u: np.ndarray) -> bool:
        u = np.asarray(u)
        return bool(np.all((u >= self.lower) & (u <= self.upper)))


def constant_terminal(value: float) -> Callable[[DriverPaths], np.ndarray]:
    """Terminal datum equal to ``value`` on every path."""
    return lambda paths: np.full(paths.particle_count, float(value))


def affine_terminal(const: float = 0.0, slope: float = 1.0) -> Callable[[DriverPaths], np.ndarray]:
    """Terminal datum ``const + slope * W_T`` (first coordinate of ``W``)."""
    return lambda paths: const + slope * paths.w_increments[:, :, 0].sum(axis=1)


@dataclass
class ProblemSpec:
    """Scalar mean-field control problem.

    Attributes
    ----------
    drift, diffusion, running_cost : term
        Structured coefficients from :mod:`mfbdsde.law` for ``f``, ``g``, ``h``.
    initial_cost : initial term
        ``Phi(y_0, law of y_0)``.
    terminal : callable
        Maps driver paths to the per-particle terminal value ``xi``; it must
        depend on ``W`` only.
    control_set : Box
    """

    drift: object
    diffusion: object
    running_cost: object
    initial_cost: object
    terminal: Callable[[DriverPaths], np.ndarray]
    control_set: Box = field(default_factory=Box)

    @property
    def interaction(self) -> InteractionSpec:
        return InteractionSpec({"f": self.drift, "g": self.diffusion, "h": self.running_cost,
                                "Phi": self.initial_cost})

    @property
    def state_law_dependent(self) -> bool:
        return self.drift.law_dependent or self.diffusion.law_dependent

    def terminal_values(self, paths: DriverPaths) -> np.ndarray:
        xi = np.asarray(self.terminal(paths), dtype=float)
        if xi.shape != (paths.particle_count,):
            raise InvalidArgumentError(f"terminal datum must have shape ({paths.particle_count},)")
        return xi


@dataclass
class LqCoefficients:
    """Constants of the scalar mean-field linear-quadratic problem.

    ``f = f1 y + f2 z + f3 u + fb1 E[y] + fb2 E[z] + fb3 E[u] + f0`` and the same
    form for ``g``; the running cost is
    ``(1/2)(h1 y^2 + h2 z^2 + h3 u^2 + hb1 E[y]^2 + hb2 E[z]^2 + hb3 E[u]^2)``
    and the initial cost ``(1/2)(phi y0^2 + phib E[y0]^2)``.
    """

    f1: float = 0.0
    f2: float = 0.0
    f3: float = 0.0
    fb1: float = 0.0
    fb2: float = 0.0
    fb3: float = 0.0
    g1: float = 0.0
    g2: float = 0.0
    g3: float = 0.0
    gb1: float = 0.0
    gb2: float = 0.0
    gb3: float = 0.0
    h1: float = 0.0
    h2: float = 0.0
    h3: float = 1.0
    hb1: float = 0.0
    hb2: float = 0.0
    hb3: float = 0.0
    phi: float = 0.0
    phib: float = 0.0
    f0: float = 0.0
    g0: float = 0.0

    @classmethod
    def names(cls) -> list:
        return [f.name for f in fields(cls)]

    @property
    def uses_mean_control(self) -> bool:
        return any((self.fb3, self.gb3, self.hb3))

    def violations(self) -> list:
        """Names of violated structural constraints of the LQ problem."""
        out = []
        for name in ("h1", "h2", "hb1", "hb2", "phi", "phib"):
            if getattr(self, name) < 0:
                out.append(f"{name} >= 0")
        if not self.h3 > 0:
            out.append("h3 > 0")
        if self.hb3 < 0:
            out.append("hb3 >= 0")
        if not abs(self.g2) + abs(self.gb2) < 1:
            out.append("|g2| + |gb2| < 1")
        return out

    def validate(self) -> LqCoefficients:
        bad = self.violations()
        if bad:
            raise InvalidArgumentError("LQ constraint violated: " + ", ".join(bad))
        return self


def lq_problem(c: LqCoefficients, terminal=None, control_set: Box | None = None,
               validate: bool = True) -> ProblemSpec:
    """Linear-quadratic problem; ``terminal`` defaults to ``xi = 0``."""
    if validate:
        c.validate()
    return ProblemSpec(
        drift=LinearTerm((c.f1, c.f2, c.f3), (c.fb1, c.fb2, c.fb3), c.f0),
        diffusion=LinearTerm((c.g1, c.g2, c.g3), (c.gb1, c.gb2, c.gb3), c.g0),
        running_cost=QuadraticTerm((c.h1, c.h2, c.h3), (c.hb1, c.hb2, c.hb3)),
        initial_cost=QuadraticInitial(c.phi, c.phib),
        terminal=terminal if terminal is not None else constant_terminal(0.0),
        control_set=control_set or Box(),
    )


def ensemble_at(y, z, u) -> Ensemble:
    """Convenience constructor for a time slice."""
    return Ensemble(np.asarray(y, dtype=float), np.asarray(z, dtype=float), np.asarray(u, dtype=float))
