"""Time grids, sampled and enumerated Brownian driver paths.

Two independent drivers are carried per particle: ``W`` enters through
forward Ito integrals and ``B`` through backward (right-endpoint) integrals.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import CapacityError, InvalidArgumentError
from .parallel import chunk_bounds, ordered_map

DEFAULT_TREE_CAP = 2**20
BLOCK_SIZE = 512
_DRIVER_TAGS = {"W": 0x57, "B": 0x42}
MODES = ("gaussian", "bernoulli", "bernoulli-tree")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``0 = t_0 < ... < t_n = T``.

    Attributes
    ----------
    horizon : float
        Terminal time ``T``.
    n_steps : int
        Number of intervals.
    points : numpy.ndarray
        Grid points, shape ``(n_steps + 1,)``.
    dt : float
        Step size ``T / n_steps``.
    """

    horizon: float
    n_steps: int
    points: np.ndarray = field(repr=False)
    dt: float


def build_grid(T: float, n_steps: int) -> TimeGrid:
    """Build a uniform grid on ``[0, T]`` with ``n_steps`` intervals."""
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgumentError(f"horizon must be positive, got {T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be a positive integer, got {n_steps}")
    n_steps = int(n_steps)
    points = np.linspace(0.0, float(T), n_steps + 1)
    points[0], points[-1] = 0.0, float(T)
    points.setflags(write=False)
    return TimeGrid(float(T), n_steps, points, float(T) / n_steps)


@dataclass(frozen=True)
class DriverPaths:
    """Per-particle increments of the forward driver ``W`` and backward driver ``B``.

    Attributes
    ----------
    grid : TimeGrid
        Shared time grid.
    w_increments : numpy.ndarray
        Shape ``(N, n_steps, l)``; entry ``[j, i]`` is ``W_{t_{i+1}} - W_{t_i}``.
    b_increments : numpy.ndarray
        Shape ``(N, n_steps, d)``; entry ``[j, i]`` is ``B_{t_{i+1}} - B_{t_i}``.
    seed : int
        Seed of the counter-based streams (0 for enumerated trees).
    mode : str
        ``"gaussian"``, ``"bernoulli"`` (random signs) or ``"bernoulli-tree"``
        (complete enumeration of all sign paths, uniform weights).
    """

    grid: TimeGrid
    w_increments: np.ndarray = field(repr=False)
    b_increments: np.ndarray = field(repr=False)
    seed: int
    mode: str

    def __post_init__(self):
        w, b = self.w_increments, self.b_increments
        if w.ndim != 3 or b.ndim != 3:
            raise InvalidArgumentError("increment arrays must have shape (N, n_steps, dim)")
        if w.shape[:2] != b.shape[:2] or w.shape[1] != self.grid.n_steps:
            raise InvalidArgumentError("increment arrays disagree with each other or with the grid")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        w.setflags(write=False)
        b.setflags(write=False)

    @property
    def particle_count(self) -> int:
        return self.w_increments.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        """``(l, d)``: dimensions of ``W`` and ``B``."""
        return self.w_increments.shape[2], self.b_increments.shape[2]

    @property
    def is_tree(self) -> bool:
        return self.mode == "bernoulli-tree"

    def w_values(self) -> np.ndarray:
        """``W_{t_i}`` for every grid point, shape ``(N, n_steps + 1, l)``, ``W_0 = 0``."""
        return _cumulative(self.w_increments)

    def b_values(self) -> np.ndarray:
        """``B_{t_i}`` for every grid point, shape ``(N, n_steps + 1, d)``, ``B_0 = 0``."""
        return _cumulative(self.b_increments)

    def b_tails(self) -> np.ndarray:
        """``B_T - B_{t_i}`` for every grid point, shape ``(N, n_steps + 1, d)``."""
        rev = np.cumsum(self.b_increments[:, ::-1], axis=1)[:, ::-1]
        zero = np.zeros_like(self.b_increments[:, :1])
        return np.concatenate([rev, zero], axis=1)

    def subset(self, index) -> DriverPaths:
        """Paths of a subset of particles (mode is downgraded from tree to bernoulli)."""
        mode = "bernoulli" if self.is_tree else self.mode
        return DriverPaths(self.grid, self.w_increments[index].copy(), self.b_increments[index].copy(),
                           self.seed, mode)


def _cumulative(increments: np.ndarray) -> np.ndarray:
    zero = np.zeros_like(increments[:, :1])
    return np.concatenate([zero, np.cumsum(increments, axis=1)], axis=1)


def _stream_block(seed: int, tag: str, block: int, count: int, shape: tuple[int, int], mode: str,
                  dt: float) -> np.ndarray:
    # Counter words: [draw, 0, block, 0]; the key separates seeds and drivers.
    bit_gen = np.random.Philox(key=np.array([seed % 2**64, _DRIVER_TAGS[tag]], dtype=np.uint64),
                               counter=np.array([0, 0, block, 0], dtype=np.uint64))
    rng = np.random.Generator(bit_gen)
    size = (count,) + shape
    if mode == "gaussian":
        return rng.standard_normal(size) * np.sqrt(dt)
    signs = rng.integers(0, 2, size=size, dtype=np.int8) * 2 - 1
    return signs.astype(float) * np.sqrt(dt)


def _sample_driver(seed, tag, N, n_steps, dim, mode, dt, threads):
    blocks = chunk_bounds(N, BLOCK_SIZE)
    parts = ordered_map(
        lambda bounds: _stream_block(seed, tag, bounds[0] // BLOCK_SIZE, bounds[1] - bounds[0],
                                     (n_steps, dim), mode, dt),
        blocks, threads)
    return np.concatenate(parts, axis=0)


def sample_paths(grid: TimeGrid, N: int | None, dims: tuple[int, int] = (1, 1), seed: int = 0,
                 mode: str = "gaussian", tree_cap: int = DEFAULT_TREE_CAP,
                 threads: int | None = None) -> DriverPaths:
    """Sample or enumerate driver paths.

    Particle ``j`` always receives the same increments for a given seed,
    whatever ``N`` or the worker count, because streams are addressed by
    fixed-size particle blocks.

    Parameters
    ----------
    grid : TimeGrid
    N : int or None
        Particle count. For ``"bernoulli-tree"`` it must be ``None`` or the
        number of leaves.
    dims : (int, int)
        Dimensions ``(l, d)`` of ``W`` and ``B``.
    seed : int
    mode : str
        ``"gaussian"``, ``"bernoulli"`` or ``"bernoulli-tree"``.
    tree_cap : int
        Maximum number of enumerated leaves.
    threads : int, optional
        Worker count; does not affect the result.
    """
    l, d = _check_dims(dims)
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "bernoulli-tree":
        paths = tree_paths(grid, (l, d), tree_cap)
        if N is not None and N != paths.particle_count:
            raise InvalidArgumentError(
                f"tree mode enumerates {paths.particle_count} leaves; got N={N}")
        return paths
    if N is None or int(N) != N or N < 1:
        raise InvalidArgumentError(f"N must be a positive integer, got {N}")
    if not 0 <= seed < 2**64:
        raise InvalidArgumentError("seed must be a 64-bit unsigned integer")
    w = _sample_driver(seed, "W", int(N), grid.n_steps, l, mode, grid.dt, threads)
    b = _sample_driver(seed, "B", int(N), grid.n_steps, d, mode, grid.dt, threads)
    return DriverPaths(grid, w, b, int(seed), mode)


def _check_dims(dims) -> tuple[int, int]:
    l, d = (int(v) for v in dims)
    if l < 1 or d < 1:
        raise InvalidArgumentError(f"driver dimensions must be >= 1, got {dims}")
    return l, d


def backward_increment_tail(paths: DriverPaths, particle: int, step: int) -> np.ndarray:
    """Return ``B_T - B_{t_i}`` for one particle (zero vector when ``i = n_steps``)."""
    n = paths.grid.n_steps
    if not 0 <= step <= n:
        raise InvalidArgumentError(f"step must lie in [0, {n}], got {step}")
    if not 0 <= particle < paths.particle_count:
        raise InvalidArgumentError(f"particle index {particle} out of range")
    tail = paths.b_increments[particle, step:]
    return tail.sum(axis=0) if step < n else np.zeros(paths.dims[1])


@dataclass(frozen=True)
class TreeNode:
    """One node of the sign tree.

    ``w_signs`` holds the ``W`` signs of steps ``< step`` (known at the node),
    ``b_signs`` the ``B`` signs of steps ``>= step``. Leaves have ``step = n``
    and carry the full ``W`` history; the root has ``step = 0`` and the full
    ``B`` history.
    """

    step: int
    w_signs: tuple
    b_signs: tuple
    weight: Fraction


def _leaf_count(n_steps: int, dims: tuple[int, int]) -> int:
    return 2 ** ((dims[0] + dims[1]) * n_steps)


def _sign_table(n_steps: int, dims: tuple[int, int], cap: int) -> tuple[np.ndarray, np.ndarray]:
    l, d = _check_dims(dims)
    leaves = _leaf_count(n_steps, (l, d))
    if leaves > cap:
        raise CapacityError(f"tree with {leaves} leaves exceeds cap {cap}")
    width = (l + d) * n_steps
    codes = np.arange(leaves, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(width - 1, -1, -1)) & 1
    signs = (2 * bits - 1).reshape(leaves, n_steps, l + d)
    return signs[:, :, :l], signs[:, :, l:]


def enumerate_tree(grid: TimeGrid, dims: tuple[int, int] = (1, 1),
                   cap: int = DEFAULT_TREE_CAP) -> list[TreeNode]:
    """Enumerate all leaves of the sign tree with uniform weights."""
    w, b = _sign_table(grid.n_steps, dims, cap)
    weight = Fraction(1, w.shape[0])
    return [TreeNode(grid.n_steps, tuple(map(tuple, w[j])), tuple(map(tuple, b[j])), weight)
            for j in range(w.shape[0])]


def tree_paths(grid: TimeGrid, dims: tuple[int, int] = (1, 1),
               cap: int = DEFAULT_TREE_CAP) -> DriverPaths:
    """Driver paths realizing every leaf of the sign tree once."""
    w, b = _sign_table(grid.n_steps, dims, cap)
    root = np.sqrt(grid.dt)
    return DriverPaths(grid, w.astype(float) * root, b.astype(float) * root, 0, "bernoulli-tree")


def node_keys(paths: DriverPaths, step: int) -> np.ndarray:
    """Integer label of the node ``(W signs before step, B signs from step on)`` per particle.

    Two particles share a label iff they pass through the same node at ``step``.
    """
    n = paths.grid.n_steps
    if not 0 <= step <= n:
        raise InvalidArgumentError(f"step must lie in [0, {n}], got {step}")
    w_bits = (paths.w_increments[:, :step] > 0).reshape(paths.particle_count, -1)
    b_bits = (paths.b_increments[:, step:] > 0).reshape(paths.particle_count, -1)
    bits = np.concatenate([w_bits, b_bits], axis=1).astype(np.int64)
    if bits.shape[1] > 62:
        raise CapacityError("node labels exceed 62 bits")
    weights = 1 << np.arange(bits.shape[1] - 1, -1, -1, dtype=np.int64)
    return bits @ weights if bits.shape[1] else np.zeros(paths.particle_count, dtype=np.int64)


def paths_to_csv(paths: DriverPaths, target: str | Path) -> Path:
    """Write increments as rows ``(particle, step, driver, coordinate, increment)``."""
    target = Path(target)
    with target.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["particle", "step", "driver", "coordinate", "increment"])
        for name, arr in (("W", paths.w_increments), ("B", paths.b_increments)):
            for j, i, c in itertools.product(*(range(s) for s in arr.shape)):
                writer.writerow([j, i, name, c, repr(float(arr[j, i, c]))])
    return target
