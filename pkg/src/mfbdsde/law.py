"""Empirical laws, Wasserstein-2 distance and structured mean-field coefficients.

Coefficients depending on a law come in three structured families:

* scalar interaction, through a statistic ``r = E[phi(Y, Z, U)]``;
* first-order interaction, as an average ``E~[k(theta, theta~)]`` of a kernel;
* linear (LQ) dependence on the means.

Each family provides its value, its ordinary partials and the two averaged
L-derivative contractions needed by the adjoint and variational equations.
Every coefficient here is scalar valued and acts on scalar ``(y, z, u)``.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, InvalidArgumentError, UnsupportedOperationError
from .parallel import chunk_bounds, ordered_map

ASSIGNMENT_CAP = 64
PAIRWISE_CAP = 4096
PAIRWISE_CHUNK = 256
WHICH = ("y", "z", "u")


@dataclass(frozen=True)
class EmpiricalLaw:
    """Uniform law on ``N`` support points.

    Attributes
    ----------
    points : numpy.ndarray
        Shape ``(N, m)``; one row per support point.
    layout : Mapping[str, slice]
        Named coordinate blocks of a row, e.g. ``{"y": slice(0, 1)}``.
    """

    points: np.ndarray = field(repr=False)
    layout: Mapping[str, slice]

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise InvalidArgumentError("support must be a nonempty (N, m) array")

    @classmethod
    def from_fields(cls, **fields: np.ndarray) -> EmpiricalLaw:
        """Build a law from per-particle arrays of shape ``(N, ...)``."""
        if not fields:
            raise InvalidArgumentError("at least one field is required")
        cols, layout, start = [], {}, 0
        sizes = {np.asarray(v).shape[0] for v in fields.values()}
        if len(sizes) != 1:
            raise InvalidArgumentError("all fields must have the same particle count")
        for name, value in fields.items():
            arr = np.asarray(value, dtype=float)
            flat = arr.reshape(arr.shape[0], -1)
            cols.append(flat)
            layout[name] = slice(start, start + flat.shape[1])
            start += flat.shape[1]
        return cls(np.concatenate(cols, axis=1), layout)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def field(self, name: str) -> np.ndarray:
        """Coordinates of one named block, shape ``(N, width)``."""
        if name not in self.layout:
            raise InvalidArgumentError(f"unknown field {name!r}; layout has {list(self.layout)}")
        return self.points[:, self.layout[name]]

    def select(self, which) -> np.ndarray:
        names = [which] if isinstance(which, str) else list(which)
        if not names:
            raise InvalidArgumentError("empty coordinate selection")
        return np.concatenate([self.field(n) for n in names], axis=1)


def moments(law: EmpiricalLaw, which, order: int = 1) -> np.ndarray:
    """Uniform average of the selected coordinates (``order=1``) or of their
    outer products (``order=2``)."""
    x = law.select(which)
    if order == 1:
        return x.mean(axis=0)
    if order == 2:
        return x.T @ x / law.size
    raise InvalidArgumentError(f"order must be 1 or 2, got {order}")


def _check_pair(a: EmpiricalLaw, b: EmpiricalLaw) -> None:
    if dict(a.layout) != dict(b.layout) or a.points.shape[1] != b.points.shape[1]:
        raise InvalidArgumentError("laws have mismatched layouts")
    if a.size != b.size:
        raise InvalidArgumentError("laws must have the same number of support points")


def wasserstein2(a: EmpiricalLaw, b: EmpiricalLaw, cap: int = ASSIGNMENT_CAP) -> float:
    """Exact Wasserstein-2 distance between two uniform laws of equal size.

    One-dimensional laws use the sorted (monotone) pairing. Higher dimensions
    solve the assignment problem exactly, which is limited to ``cap`` points.
    """
    _check_pair(a, b)
    if a.points.shape[1] == 1:
        diff = np.sort(a.points[:, 0]) - np.sort(b.points[:, 0])
        return float(np.sqrt(np.mean(diff**2)))
    if a.size > cap:
        raise CapacityError(f"exact assignment limited to {cap} points, got {a.size}")
    cost = ((a.points[:, None, :] - b.points[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def coordinatewise_w2(a: EmpiricalLaw, b: EmpiricalLaw) -> dict:
    """Diagnostic only: root of the summed per-coordinate 1-D distances squared.

    This is a lower bound on the true distance, labeled as such in the result.
    """
    _check_pair(a, b)
    sq = np.mean((np.sort(a.points, axis=0) - np.sort(b.points, axis=0)) ** 2, axis=0)
    return {"label": "coordinatewise-lower-bound", "value": float(np.sqrt(sq.sum())),
            "per_coordinate": np.sqrt(sq).tolist()}


def identity_coupling_rms(a: np.ndarray, b: np.ndarray) -> float:
    """Root-mean-square distance under the particle-index coupling (a W2 upper bound)."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean(diff.reshape(diff.shape[0], -1) ** 2) * _width(diff)))


def _width(arr: np.ndarray) -> int:
    return int(np.prod(arr.shape[1:])) if arr.ndim > 1 else 1


def scalar_functional(law: EmpiricalLaw, fn: Callable[[EmpiricalLaw], np.ndarray]) -> float:
    """Average of ``fn`` over the support; ``fn`` maps the law to per-point values."""
    values = np.broadcast_to(np.asarray(fn(law), dtype=float), (law.size,))
    return float(values.mean())


def pairwise_average(law: EmpiricalLaw, kernel: Callable, x) -> float:
    """``E~[k(x, X~)]`` with ``X~`` distributed as ``law``.

    ``kernel(x, law)`` returns the per-point values ``k(x, X_j)``.
    """
    values = np.broadcast_to(np.asarray(kernel(x, law), dtype=float), (law.size,))
    return float(values.mean())


def pairwise_mean(block: Callable[[slice], np.ndarray], n_rows: int, n_cols: int,
                  cap: int = PAIRWISE_CAP, threads: int | None = None) -> np.ndarray:
    """Row means of an ``(n_rows, n_cols)`` matrix produced in fixed row chunks.

    ``block(rows)`` returns the sub-matrix for a row slice. Chunk boundaries
    are fixed, so the result does not depend on the worker count.
    """
    if max(n_rows, n_cols) > cap:
        raise CapacityError(f"pairwise averages limited to {cap} particles, got {max(n_rows, n_cols)}")
    parts = ordered_map(lambda b: np.asarray(block(slice(*b))).mean(axis=1),
                        chunk_bounds(n_rows, PAIRWISE_CHUNK), threads)
    return np.concatenate(parts) if parts else np.zeros(0)


# Structured coefficients -----------------------------------------------------

@dataclass(frozen=True)
class Ensemble:
    """Time-slice of scalar per-particle fields that defines the current law."""

    y: np.ndarray
    z: np.ndarray
    u: np.ndarray

    def law(self) -> EmpiricalLaw:
        return EmpiricalLaw.from_fields(y=self.y, z=self.z, u=self.u)


def _bcast(value, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (n,)).astype(float)


class LinearTerm:
    """``a_y y + a_z z + a_u u + b_y E[y] + b_z E[z] + b_u E[u] + offset``."""

    kind = "linear-lq"

    def __init__(self, a=(0.0, 0.0, 0.0), bar=(0.0, 0.0, 0.0), offset: float = 0.0):
        self.a = tuple(float(v) for v in a)
        self.bar = tuple(float(v) for v in bar)
        self.offset = float(offset)

    @property
    def law_dependent(self) -> bool:
        return any(self.bar)

    def value(self, t, y, z, u, ens: Ensemble) -> np.ndarray:
        means = (ens.y.mean(), ens.z.mean(), ens.u.mean())
        out = self.a[0] * y + self.a[1] * z + self.a[2] * u + self.offset
        return out + sum(b * m for b, m in zip(self.bar, means))

    def grad(self, t, y, z, u, ens: Ensemble):
        n = np.shape(y)[0]
        return tuple(_bcast(a, n) for a in self.a)

    def mf_adjoint(self, t, ens: Ensemble, weight: np.ndarray):
        n = ens.y.shape[0]
        w = float(np.mean(weight))
        return tuple(_bcast(b * w, n) for b in self.bar)

    def mf_tangent(self, t, ens: Ensemble, dy, dz, du) -> np.ndarray:
        n = ens.y.shape[0]
        return _bcast(sum(b * float(np.mean(d)) for b, d in zip(self.bar, (dy, dz, du))), n)

    def l_derivative(self, t, base, ens: Ensemble, point, which: str) -> np.ndarray:
        return np.full((np.shape(base[0])[0], np.shape(point[0])[0]), self.bar[WHICH.index(which)])


class QuadraticTerm:
    """``(1/2)(h_y y^2 + h_z z^2 + h_u u^2 + hb_y E[y]^2 + hb_z E[z]^2 + hb_u E[u]^2)``."""

    kind = "linear-lq"

    def __init__(self, h=(0.0, 0.0, 0.0), hbar=(0.0, 0.0, 0.0)):
        self.h = tuple(float(v) for v in h)
        self.hbar = tuple(float(v) for v in hbar)

    @property
    def law_dependent(self) -> bool:
        return any(self.hbar)

    def value(self, t, y, z, u, ens: Ensemble) -> np.ndarray:
        means = (ens.y.mean(), ens.z.mean(), ens.u.mean())
        out = self.h[0] * y**2 + self.h[1] * z**2 + self.h[2] * u**2
        return 0.5 * (out + sum(b * m**2 for b, m in zip(self.hbar, means)))

    def grad(self, t, y, z, u, ens: Ensemble):
        return self.h[0] * y, self.h[1] * z, self.h[2] * u

    def mf_adjoint(self, t, ens: Ensemble, weight: np.ndarray):
        n = ens.y.shape[0]
        w = float(np.mean(weight))
        means = (ens.y.mean(), ens.z.mean(), ens.u.mean())
        return tuple(_bcast(b * m * w, n) for b, m in zip(self.hbar, means))

    def mf_tangent(self, t, ens: Ensemble, dy, dz, du) -> np.ndarray:
        means = (ens.y.mean(), ens.z.mean(), ens.u.mean())
        total = sum(b * m * float(np.mean(d)) for b, m, d in zip(self.hbar, means, (dy, dz, du)))
        return _bcast(total, ens.y.shape[0])

    def l_derivative(self, t, base, ens: Ensemble, point, which: str) -> np.ndarray:
        k = WHICH.index(which)
        m = (ens.y.mean(), ens.z.mean(), ens.u.mean())[k]
        return np.full((np.shape(base[0])[0], np.shape(point[0])[0]), self.hbar[k] * m)


class ScalarTerm:
    """Scalar interaction ``outer(t, y, z, u, r)`` with ``r = E[inner(Y, Z, U)]``.

    Parameters
    ----------
    outer, outer_grad : callable
        ``outer(t, y, z, u, r)`` and its partials ``(d_y, d_z, d_u, d_r)``.
    inner, inner_grad : callable
        ``inner(y, z, u)`` and its partials ``(d_y, d_z, d_u)``. Omit both for
        a coefficient without law dependence.
    """

    kind = "scalar"

    def __init__(self, outer, outer_grad, inner=None, inner_grad=None):
        self.outer, self.outer_grad = outer, outer_grad
        self.inner = inner if inner is not None else (lambda y, z, u: np.zeros_like(y))
        self.inner_grad = inner_grad if inner_grad is not None else (
            lambda y, z, u: (np.zeros_like(y),) * 3)
        self._law_dependent = inner is not None

    @property
    def law_dependent(self) -> bool:
        return self._law_dependent

    def statistic(self, ens: Ensemble) -> float:
        return float(np.mean(self.inner(ens.y, ens.z, ens.u)))

    def value(self, t, y, z, u, ens: Ensemble) -> np.ndarray:
        return _bcast(self.outer(t, y, z, u, self.statistic(ens)), np.shape(y)[0])

    def grad(self, t, y, z, u, ens: Ensemble):
        n = np.shape(y)[0]
        g = self.outer_grad(t, y, z, u, self.statistic(ens))
        return tuple(_bcast(v, n) for v in g[:3])

    def _dr(self, t, ens: Ensemble) -> np.ndarray:
        g = self.outer_grad(t, ens.y, ens.z, ens.u, self.statistic(ens))
        return _bcast(g[3], ens.y.shape[0])

    def mf_adjoint(self, t, ens: Ensemble, weight: np.ndarray):
        n = ens.y.shape[0]
        scale = float(np.mean(weight * self._dr(t, ens)))
        return tuple(scale * _bcast(v, n) for v in self.inner_grad(ens.y, ens.z, ens.u))

    def mf_tangent(self, t, ens: Ensemble, dy, dz, du) -> np.ndarray:
        n = ens.y.shape[0]
        gy, gz, gu = (_bcast(v, n) for v in self.inner_grad(ens.y, ens.z, ens.u))
        dr = float(np.mean(gy * dy + gz * dz + gu * du))
        return self._dr(t, ens) * dr

    def l_derivative(self, t, base, ens: Ensemble, point, which: str) -> np.ndarray:
        r = self.statistic(ens)
        nb, npt = np.shape(base[0])[0], np.shape(point[0])[0]
        dr = _bcast(self.outer_grad(t, *base, r)[3], nb)
        dphi = _bcast(self.inner_grad(*point)[WHICH.index(which)], npt)
        return dr[:, None] * dphi[None, :]


class KernelTerm:
    """First-order interaction ``E~[kernel(t, y, z, u, Y~, Z~, U~)]``.

    ``kernel_grad`` returns the six partials ``(d_y, d_z, d_u, d_y', d_z', d_u')``.
    Averages are pairwise, hence ``O(N^2)`` and capped at ``PAIRWISE_CAP``.
    """

    kind = "first-order"
    law_dependent = True

    def __init__(self, kernel, kernel_grad, cap: int = PAIRWISE_CAP):
        self.kernel, self.kernel_grad, self.cap = kernel, kernel_grad, cap

    def _pair(self, fn, t, left, right, index=None):
        ly, lz, lu = left
        ry, rz, ru = right

        def block(rows):
            args = (t, ly[rows, None], lz[rows, None], lu[rows, None], ry[None, :], rz[None, :], ru[None, :])
            out = fn(*args)
            out = out if index is None else out[index]
            return np.broadcast_to(out, (ly[rows].shape[0], ry.shape[0]))
        return block

    def _mean(self, block, n_rows, n_cols):
        return pairwise_mean(block, n_rows, n_cols, self.cap)

    def value(self, t, y, z, u, ens: Ensemble) -> np.ndarray:
        left = tuple(_bcast(v, np.shape(y)[0]) for v in (y, z, u))
        right = (ens.y, ens.z, ens.u)
        return self._mean(self._pair(self.kernel, t, left, right), left[0].shape[0], ens.y.shape[0])

    def grad(self, t, y, z, u, ens: Ensemble):
        left = tuple(_bcast(v, np.shape(y)[0]) for v in (y, z, u))
        right = (ens.y, ens.z, ens.u)
        return tuple(self._mean(self._pair(self.kernel_grad, t, left, right, k), left[0].shape[0],
                                ens.y.shape[0]) for k in range(3))

    def mf_adjoint(self, t, ens: Ensemble, weight: np.ndarray):
        # Row i averages over j of weight_j * d_{.'} kernel(theta_j, theta_i).
        selfs = (ens.y, ens.z, ens.u)
        w = np.asarray(weight, dtype=float)
        out = []
        for k in range(3, 6):
            def block(rows, k=k):
                # Base point runs over columns, evaluation point over rows.
                base = tuple(v[None, :] for v in selfs)
                evaluation = tuple(v[rows, None] for v in selfs)
                vals = self.kernel_grad(t, *base, *evaluation)[k]
                vals = np.broadcast_to(vals, (evaluation[0].shape[0], selfs[0].shape[0]))
                return vals * w[None, :]
            out.append(self._mean(block, ens.y.shape[0], ens.y.shape[0]))
        return tuple(out)

    def mf_tangent(self, t, ens: Ensemble, dy, dz, du) -> np.ndarray:
        selfs = (ens.y, ens.z, ens.u)
        dirs = tuple(_bcast(v, ens.y.shape[0]) for v in (dy, dz, du))

        def block(rows):
            args = (t, *(v[rows, None] for v in selfs), *(v[None, :] for v in selfs))
            g = self.kernel_grad(*args)
            shape = (selfs[0][rows].shape[0], selfs[0].shape[0])
            return sum(np.broadcast_to(g[3 + k], shape) * dirs[k][None, :] for k in range(3))
        return self._mean(block, ens.y.shape[0], ens.y.shape[0])

    def l_derivative(self, t, base, ens: Ensemble, point, which: str) -> np.ndarray:
        nb, npt = np.shape(base[0])[0], np.shape(point[0])[0]
        args = (t, *(_bcast(v, nb)[:, None] for v in base), *(_bcast(v, npt)[None, :] for v in point))
        return np.broadcast_to(self.kernel_grad(*args)[3 + WHICH.index(which)], (nb, npt)).copy()


# Initial-cost terms: functions of (y_0, law of y_0) -----------------------------

class QuadraticInitial:
    """``(1/2)(phi y^2 + phibar E[y]^2)``."""

    kind = "linear-lq"

    def __init__(self, phi: float = 0.0, phibar: float = 0.0):
        self.phi, self.phibar = float(phi), float(phibar)

    @property
    def law_dependent(self) -> bool:
        return self.phibar != 0.0

    def value(self, y0: np.ndarray) -> np.ndarray:
        return 0.5 * (self.phi * y0**2 + self.phibar * y0.mean() ** 2)

    def partial(self, y0: np.ndarray) -> np.ndarray:
        return self.phi * y0

    def total_gradient(self, y0: np.ndarray) -> np.ndarray:
        return self.phi * y0 + self.phibar * y0.mean()

    def l_derivative(self, base: np.ndarray, y0: np.ndarray, point: np.ndarray) -> np.ndarray:
        return np.full((base.shape[0], point.shape[0]), self.phibar * y0.mean())


class ScalarInitial:
    """``outer(y, r)`` with ``r = E[inner(Y)]``; ``outer_grad`` returns ``(d_y, d_r)``."""

    kind = "scalar"

    def __init__(self, outer, outer_grad, inner=None, inner_grad=None):
        self.outer, self.outer_grad = outer, outer_grad
        self.inner = inner if inner is not None else np.zeros_like
        self.inner_grad = inner_grad if inner_grad is not None else np.zeros_like
        self._law_dependent = inner is not None

    @property
    def law_dependent(self) -> bool:
        return self._law_dependent

    def value(self, y0):
        return _bcast(self.outer(y0, float(np.mean(self.inner(y0)))), y0.shape[0])

    def partial(self, y0):
        return _bcast(self.outer_grad(y0, float(np.mean(self.inner(y0))))[0], y0.shape[0])

    def total_gradient(self, y0):
        r = float(np.mean(self.inner(y0)))
        dy, dr = (_bcast(v, y0.shape[0]) for v in self.outer_grad(y0, r))
        return dy + float(np.mean(dr)) * _bcast(self.inner_grad(y0), y0.shape[0])

    def l_derivative(self, base, y0, point):
        r = float(np.mean(self.inner(y0)))
        dr = _bcast(self.outer_grad(base, r)[1], base.shape[0])
        return dr[:, None] * _bcast(self.inner_grad(point), point.shape[0])[None, :]


class KernelInitial:
    """``E~[kernel(y, Y~)]``; ``kernel_grad`` returns ``(d_y, d_y')``."""

    kind = "first-order"
    law_dependent = True

    def __init__(self, kernel, kernel_grad, cap: int = PAIRWISE_CAP):
        self.kernel, self.kernel_grad, self.cap = kernel, kernel_grad, cap

    def _mean(self, fn, rows_src, cols_src):
        def block(rows):
            out = fn(rows_src[rows, None], cols_src[None, :])
            return np.broadcast_to(out, (rows_src[rows].shape[0], cols_src.shape[0]))
        return pairwise_mean(block, rows_src.shape[0], cols_src.shape[0], self.cap)

    def value(self, y0):
        return self._mean(self.kernel, y0, y0)

    def partial(self, y0):
        return self._mean(lambda a, b: self.kernel_grad(a, b)[0], y0, y0)

    def total_gradient(self, y0):
        # Second part averages d_{y'} kernel(y~, y_self) over y~.
        return self.partial(y0) + self._mean(lambda a, b: self.kernel_grad(b, a)[1], y0, y0)

    def l_derivative(self, base, y0, point):
        return np.broadcast_to(self.kernel_grad(base[:, None], point[None, :])[1],
                               (base.shape[0], point.shape[0])).copy()


@dataclass
class InteractionSpec:
    """Structured coefficients of a control problem keyed by name.

    ``terms`` maps ``"f"``, ``"g"``, ``"h"`` to running terms and ``"Phi"`` to
    an initial-cost term. ``kind`` is the common interaction family or
    ``"none"`` when no term depends on the law.
    """

    terms: dict

    @property
    def kind(self) -> str:
        kinds = {t.kind for t in self.terms.values() if t.law_dependent}
        if not kinds:
            return "none"
        return kinds.pop() if len(kinds) == 1 else "mixed"


def l_derivative(spec: InteractionSpec, which: str, base, ens: Ensemble, point,
                 coefficient: str = "f", t: float = 0.0) -> np.ndarray:
    """L-derivative ``d_{mu_which} c(base, law)(point)`` of one coefficient.

    Parameters
    ----------
    spec : InteractionSpec
    which : {"y", "z", "u"}
        Law coordinate to differentiate in (only ``"y"`` for ``"Phi"``).
    base, point : tuple of arrays
        ``(y, z, u)`` arrays of the base points and of the evaluation points
        (a single array of ``y_0`` values for ``"Phi"``).
    ens : Ensemble
        Support of the law (for ``"Phi"`` its ``y`` field is the law of ``y_0``).

    Returns
    -------
    numpy.ndarray
        Matrix indexed by (base point, evaluation point).
    """
    if spec.kind == "none":
        raise UnsupportedOperationError("L-derivative requested for a law-independent specification")
    if which not in WHICH:
        raise InvalidArgumentError(f"which must be one of {WHICH}, got {which!r}")
    term = spec.terms[coefficient]
    if coefficient == "Phi":
        if which != "y":
            raise InvalidArgumentError("the initial cost depends on the law of y only")
        return term.l_derivative(np.atleast_1d(np.asarray(base, dtype=float)), ens.y,
                                 np.atleast_1d(np.asarray(point, dtype=float)))
    base = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in base)
    point = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in point)
    return term.l_derivative(t, base, ens, point, which)


@dataclass
class CoefficientBounds:
    """Estimated bounds from a probe sample.

    Attributes
    ----------
    alpha1 : float
        Largest ``|d_z g|`` seen.
    alpha2 : float
        Largest ``E~|d_{mu_z} g(theta)(theta~)|^2`` over base points.
    passed : bool
        ``alpha1 < 1`` and ``alpha1 + alpha2 < 1`` and other partials bounded.
    messages : list of str
        Names of failed checks.
    """

    alpha1: float
    alpha2: float
    passed: bool
    partial_sup: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)


def validate_coefficient_bounds(spec: InteractionSpec, probe: Ensemble, times=(0.0,),
                                partial_limit: float = 1e8) -> CoefficientBounds:
    """Estimate the smallness constants of the diffusion and spot-check the other partials."""
    alpha1 = alpha2 = 0.0
    sup = {}
    for t in times:
        for name in ("f", "g", "h"):
            term = spec.terms.get(name)
            if term is None:
                continue
            grads = term.grad(t, probe.y, probe.z, probe.u, probe)
            for which, gv in zip(WHICH, grads):
                key = f"d{which} {name}"
                sup[key] = max(sup.get(key, 0.0), float(np.max(np.abs(gv))))
        g = spec.terms.get("g")
        if g is not None:
            alpha1 = max(alpha1, sup["dz g"])
            if g.law_dependent:
                base = (probe.y, probe.z, probe.u)
                mat = g.l_derivative(t, base, probe, base, "z")
                alpha2 = max(alpha2, float(np.max(np.mean(mat**2, axis=1))))
    messages = []
    if not alpha1 < 1:
        messages.append(f"H1: alpha1 = {alpha1:.6g} >= 1")
    if not alpha1 + alpha2 < 1:
        messages.append(f"H2: alpha1 + alpha2 = {alpha1 + alpha2:.6g} >= 1")
    for key, value in sup.items():
        if key.startswith(("dy f", "dz f", "du f", "dy g", "dz g", "du g")) and not value < partial_limit:
            messages.append(f"H1: sup |{key}| = {value:.3g} is not bounded")
    messages.extend(_growth_messages(spec, probe))
    return CoefficientBounds(alpha1, alpha2, not messages, sup, messages)


def _growth_messages(spec: InteractionSpec, probe: Ensemble) -> list:
    """Spot-check at-most-quadratic growth of scalar-interaction statistics."""
    out = []
    for name, term in spec.terms.items():
        if not isinstance(term, ScalarTerm) or not term.law_dependent:
            continue
        ratios = []
        for scale in (10.0, 1000.0):
            y, z, u = probe.y * scale, probe.z * scale, probe.u * scale
            size = 1.0 + y**2 + z**2 + u**2
            ratios.append(float(np.max(np.abs(term.inner(y, z, u)) / size)))
        if ratios[1] > 10.0 * ratios[0] + 1.0:
            out.append(f"growth: statistic of {name} grows faster than quadratically")
    return out
