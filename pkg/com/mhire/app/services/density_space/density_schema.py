from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from com.mhire.app.services.errors import GridMismatchError


def _frozen(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def mu_cell_weights(breakpoints: np.ndarray) -> np.ndarray:
    """Exact integrals of (z ^ 1) dz over each cell (z_{i-1}, z_i]."""
    z = np.asarray(breakpoints, dtype=float)
    antiderivative = np.where(z <= 1.0, 0.5 * z ** 2, z - 0.5)
    return np.diff(antiderivative)


def dyadic_blocks(breakpoints: np.ndarray) -> List[np.ndarray]:
    """Group cell indices by the dyadic interval [2^i, 2^(i+1)] containing them.

    A cell whose left edge is 0 forms its own block. Raises when a cell straddles
    a power of two, i.e. when the grid is not dyadic-aligned.

    Blocks share no cells, so a jump sitting exactly on a power of two lies between
    two blocks and enters neither block's variation.
    """
    left, right = breakpoints[:-1], breakpoints[1:]
    labels = []
    for a, b in zip(left, right):
        if a <= 0.0:
            labels.append(None)
            continue
        lo = np.floor(np.log2(a) + 1e-12)
        hi = np.ceil(np.log2(b) - 1e-12)
        if hi - lo > 1:
            raise GridMismatchError(f"Cell ({a}, {b}] straddles a dyadic point; grid is not dyadic-aligned")
        labels.append(int(lo))

    blocks: List[List[int]] = []
    previous = object()
    for index, label in enumerate(labels):
        if label is None or label != previous:
            blocks.append([index])
        else:
            blocks[-1].append(index)
        previous = label
    return [np.array(block, dtype=int) for block in blocks]


@dataclass(frozen=True, eq=False)
class GriddedDensity:
    """Piecewise-constant jump density, value k_i on the cell (z_{i-1}, z_i], zero outside."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        breakpoints = _frozen(self.breakpoints)
        values = np.array(self.values, dtype=float)
        if breakpoints.ndim != 1 or breakpoints.size < 2:
            raise GridMismatchError("A gridded density needs at least two breakpoints")
        if breakpoints[0] < 0 or np.any(np.diff(breakpoints) <= 0) or not np.all(np.isfinite(breakpoints)):
            raise GridMismatchError("Breakpoints must be finite, nonnegative and strictly ascending")
        if values.shape != (breakpoints.size - 1,):
            raise GridMismatchError(
                f"Expected {breakpoints.size - 1} cell values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("Density values must be finite")
        if np.any(values < -1e-12):
            raise ValueError("Density values must be nonnegative")
        values = np.maximum(values, 0.0)
        values.setflags(write=False)
        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "values", values)

    @property
    def n_cells(self) -> int:
        return self.values.size

    @property
    def left(self) -> np.ndarray:
        return self.breakpoints[:-1]

    @property
    def right(self) -> np.ndarray:
        return self.breakpoints[1:]

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    def pdf(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        index = np.searchsorted(self.breakpoints, z, side="left") - 1
        inside = (z > self.breakpoints[0]) & (z <= self.breakpoints[-1])
        return np.where(inside, self.values[np.clip(index, 0, self.n_cells - 1)], 0.0)

    def with_values(self, values) -> "GriddedDensity":
        return GriddedDensity(self.breakpoints, values)

    def same_grid(self, breakpoints: np.ndarray) -> bool:
        return self.breakpoints.shape == np.shape(breakpoints) and np.allclose(
            self.breakpoints, breakpoints, rtol=1e-12, atol=0.0
        )

    def is_dyadic_aligned(self) -> bool:
        try:
            dyadic_blocks(self.breakpoints)
        except GridMismatchError:
            return False
        return True

    # Jump-law interface shared with AnalyticDensity

    domain_lower = -np.inf
    is_finite_activity = True

    def laplace_exponent(self, z) -> np.ndarray:
        """int (1 - e^{-z u}) k(u) du by 8-point Gauss-Legendre on every cell."""
        z = np.asarray(z, dtype=float)
        nodes, weights = np.polynomial.legendre.leggauss(8)
        half = 0.5 * self.widths
        u = (0.5 * (self.left + self.right))[:, None] + half[:, None] * nodes[None, :]
        cell_weights = (self.values * half)[:, None] * weights[None, :]
        kernel = -np.expm1(-np.multiply.outer(z, u))
        return np.sum(kernel * cell_weights, axis=(-2, -1))

    def mean(self) -> float:
        return float(np.sum(self.values * 0.5 * (self.right ** 2 - self.left ** 2)))

    def mu_norm(self) -> float:
        return float(np.sum(np.abs(self.values) * mu_cell_weights(self.breakpoints)))

    def tail_rate(self, eps: float = 0.0) -> float:
        return float(np.sum(self.values * np.clip(self.right - np.maximum(self.left, eps), 0.0, None)))

    def cumulative(self, z) -> np.ndarray:
        """int_0^z k(u) du, exact for the step function."""
        masses = np.concatenate([[0.0], np.cumsum(self.values * self.widths)])
        return np.interp(z, self.breakpoints, masses, left=0.0, right=masses[-1])

    def cell_masses(self, breakpoints) -> np.ndarray:
        return np.diff(self.cumulative(np.asarray(breakpoints, dtype=float)))


def dyadic_breakpoints(z_min_exp: int = -6, z_max_exp: int = 6, cells_per_block: int = 8) -> np.ndarray:
    """Breakpoints on (2^z_min_exp, 2^z_max_exp] with equal-width cells inside each dyadic block."""
    if z_max_exp <= z_min_exp:
        raise GridMismatchError("z_max_exp must exceed z_min_exp")
    if cells_per_block < 1:
        raise GridMismatchError("cells_per_block must be at least 1")
    edges = [2.0 ** z_min_exp]
    for exponent in range(z_min_exp, z_max_exp):
        block = np.linspace(2.0 ** exponent, 2.0 ** (exponent + 1), cells_per_block + 1)[1:]
        edges.extend(block.tolist())
    return np.array(edges)


@dataclass(frozen=True, eq=False)
class LambdaGrid:
    """Quadrature nodes and weights for the weighted L2(w) norm on [0, lambda_max]."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = _frozen(self.nodes)
        weights = _frozen(self.weights)
        if nodes.ndim != 1 or nodes.size < 1:
            raise GridMismatchError("Lambda grid needs at least one node")
        if weights.shape != nodes.shape:
            raise GridMismatchError(f"Got {weights.size} weights for {nodes.size} lambda nodes")
        if not np.all(np.isfinite(nodes)) or nodes[0] < 0 or np.any(np.diff(nodes) <= 0):
            raise GridMismatchError("Lambda nodes must be finite, nonnegative and strictly ascending")
        if np.any(weights < 0) or not np.any(weights > 0):
            raise GridMismatchError("Lambda weights must be nonnegative with at least one positive weight")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def lambda_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def size(self) -> int:
        return self.nodes.size

    def norm_sq(self, values) -> float:
        values = np.asarray(values, dtype=float)
        if values.shape != self.nodes.shape:
            raise GridMismatchError(f"Vector of length {values.size} does not match {self.size} lambda nodes")
        return float(np.sum(self.weights * values ** 2))

    def with_weights(self, weights) -> "LambdaGrid":
        return LambdaGrid(self.nodes, weights)


def trapezoid_grid(lambda_max: float = 2.0, n_nodes: int = 64, weight=None) -> LambdaGrid:
    """Trapezoid rule on [0, lambda_max]; ``weight`` is w(lambda), defaulting to the indicator."""
    if not np.isfinite(lambda_max) or lambda_max <= 0:
        raise GridMismatchError("lambda_max must be finite and positive")
    if n_nodes < 2:
        raise GridMismatchError("Trapezoid rule needs at least two nodes")
    nodes = np.linspace(0.0, lambda_max, n_nodes)
    weights = np.full(n_nodes, lambda_max / (n_nodes - 1))
    weights[[0, -1]] *= 0.5
    if weight is not None:
        weights = weights * np.asarray(weight(nodes), dtype=float)
    return LambdaGrid(nodes, weights)


class ConstraintMode(str, Enum):
    MONOTONE = "monotone"
    BOUNDED_VARIATION = "bounded-variation"


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Discretised K~_R: 0 <= k <= envelope plus a monotone or per-block variation condition."""

    envelope: GriddedDensity
    R: float
    mode: ConstraintMode = ConstraintMode.MONOTONE
    blocks: List[np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("R must be positive")
        object.__setattr__(self, "mode", ConstraintMode(self.mode))
        envelope_mu = float(np.sum(self.envelope.values * mu_cell_weights(self.envelope.breakpoints)))
        if envelope_mu > self.R * (1 + 1e-12):
            raise ValueError(f"Envelope mu-norm {envelope_mu:.6g} exceeds R={self.R}")
        if self.mode is ConstraintMode.BOUNDED_VARIATION:
            blocks = dyadic_blocks(self.envelope.breakpoints)
        else:
            blocks = [np.arange(self.envelope.n_cells)]
        object.__setattr__(self, "blocks", blocks)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.envelope.breakpoints

    @property
    def upper(self) -> np.ndarray:
        return self.envelope.values

    def block_variation(self, values) -> np.ndarray:
        """sum |k_{j+1} - k_j| over neighbouring cells of each dyadic block."""
        values = np.asarray(values, dtype=float)
        return np.array([np.sum(np.abs(np.diff(values[block]))) for block in self.blocks])

    def violation(self, values) -> float:
        """Largest constraint violation of a values vector (0 when feasible)."""
        values = np.asarray(values, dtype=float)
        if values.shape != self.upper.shape:
            raise GridMismatchError(f"Vector of length {values.size} does not match {self.upper.size} cells")
        worst = max(0.0, float(np.max(-values)), float(np.max(values - self.upper)))
        if self.mode is ConstraintMode.MONOTONE:
            if values.size > 1:
                worst = max(worst, float(np.max(np.diff(values))))
        else:
            worst = max(worst, float(np.max(self.block_variation(values) - self.R)))
        return worst

    def contains(self, values, tol: float = 1e-9) -> bool:
        if isinstance(values, GriddedDensity):
            if not values.same_grid(self.breakpoints):
                raise GridMismatchError("Density grid does not match the constraint set grid")
            values = values.values
        return self.violation(values) <= tol


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Discretised map T: density values -> model log-Laplace curve on a lambda grid.

    ``horizon`` is the sampling interval for the one-step (g2) curve or ``inf``
    for the stationary (g1) curve.
    """

    horizon: float
    entries: np.ndarray
    offset: np.ndarray
    breakpoints: np.ndarray
    lgrid: LambdaGrid
    sigma_min: Optional[float] = None

    def __post_init__(self):
        entries = _frozen(self.entries)
        offset = _frozen(self.offset)
        breakpoints = _frozen(self.breakpoints)
        if entries.shape != (self.lgrid.size, breakpoints.size - 1):
            raise GridMismatchError(
                f"Operator shape {entries.shape} does not match grids "
                f"({self.lgrid.size}, {breakpoints.size - 1})"
            )
        if offset.shape != (self.lgrid.size,):
            raise GridMismatchError("Offset length does not match the lambda grid")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "breakpoints", breakpoints)

    @property
    def shape(self):
        return self.entries.shape

    def apply(self, values) -> np.ndarray:
        return -self.offset - self.entries @ np.asarray(values, dtype=float)
