import logging
import math
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from com.mhire.app.services.density_space.density_schema import (
    ConstraintMode,
    ConstraintSet,
    GriddedDensity,
    LambdaGrid,
    OperatorMatrix,
    dyadic_blocks,
    mu_cell_weights,
)
from com.mhire.app.services.errors import GridMismatchError
from com.mhire.app.services.mechanism_core.mechanism import adaptive_quad, phi, v_flow
from com.mhire.app.services.mechanism_core.mechanism_schema import BranchingMechanism

logger = logging.getLogger(__name__)

CSV_HEADER = "z_left,z_right,value"

# Gauss-Legendre orders for operator assembly
Z_NODES_PER_CELL = 8
U_NODES_PER_PIECE = 16
U_GEOMETRIC_LEVELS = 40


def mu_norm(k) -> float:
    """int |k(z)| (z ^ 1) dz."""
    return float(k.mu_norm())


def mu_distance(k1: GriddedDensity, k2: GriddedDensity) -> float:
    if not k1.same_grid(k2.breakpoints):
        raise GridMismatchError("mu-distance needs densities on the same grid")
    return float(np.sum(np.abs(k1.values - k2.values) * mu_cell_weights(k1.breakpoints)))


def _horizon_lower_limit(mech: BranchingMechanism, horizon: float, lam):
    return v_flow(mech, horizon, lam)


def feature(mech: BranchingMechanism, lam: float, z: float, horizon: float) -> float:
    """Phi_T(lambda, z) = int_0^T (1 - e^{-z v_s(lambda)}) ds.

    Evaluated as int_{v_T(lambda)}^{lambda} (1 - e^{-z u}) / phi(u) du; the
    integrand tends to z/b at u = 0.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if z <= 0:
        raise ValueError("z must be positive")
    if lam == 0:
        return 0.0
    lower = _horizon_lower_limit(mech, horizon, lam)

    def integrand(u: float) -> float:
        if u == 0.0:
            return z / mech.b
        return -math.expm1(-z * u) / phi(mech, u)

    return adaptive_quad(integrand, lower, lam, "feature integral")


def _geometric_gauss_rule(lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on [lo, hi] with pieces shrinking geometrically toward lo."""
    nodes, weights = np.polynomial.legendre.leggauss(U_NODES_PER_PIECE)
    length = hi - lo
    cuts = lo + length * np.concatenate([[0.0], 2.0 ** -np.arange(U_GEOMETRIC_LEVELS, -1, -1)])
    a, b = cuts[:-1], cuts[1:]
    half = 0.5 * (b - a)
    points = (0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]
    return points.ravel(), (half[:, None] * weights[None, :]).ravel()


def _offset(mech: BranchingMechanism, beta: float, lam: np.ndarray, lower: np.ndarray) -> np.ndarray:
    # beta * int_0^T v_s ds = beta * int_{v_T}^{lambda} du / (b + c u)
    if mech.c == 0:
        return beta * (lam - lower) / mech.b
    return (beta / mech.c) * np.log((mech.b + mech.c * lam) / (mech.b + mech.c * lower))


def assemble_operator(
    mech: BranchingMechanism,
    beta: float,
    breakpoints: np.ndarray,
    lgrid: LambdaGrid,
    horizon: float,
) -> OperatorMatrix:
    """Discretise k -> g(.; k) on the z-grid and lambda-grid.

    A[j, i] integrates Phi_T(lambda_j, .) over z-cell i with 8-point Gauss; Phi_T
    itself uses a composite Gauss rule in u refined toward the lower limit.
    """
    if not horizon > 0:
        raise ValueError("Operator horizon must be positive or inf")
    breakpoints = np.asarray(breakpoints, dtype=float)
    if breakpoints.ndim != 1 or breakpoints.size < 2 or np.any(np.diff(breakpoints) <= 0) or breakpoints[0] < 0:
        raise GridMismatchError("Operator breakpoints must be nonnegative and strictly ascending")

    z_nodes, z_weights = np.polynomial.legendre.leggauss(Z_NODES_PER_CELL)
    left, right = breakpoints[:-1], breakpoints[1:]
    half = 0.5 * (right - left)
    z_points = (0.5 * (left + right))[:, None] + half[:, None] * z_nodes[None, :]
    cell_weights = half[:, None] * z_weights[None, :]

    lam = lgrid.nodes
    lower = np.asarray(_horizon_lower_limit(mech, horizon, lam), dtype=float)
    entries = np.zeros((lam.size, left.size))
    for j, (lam_j, lower_j) in enumerate(zip(lam, lower)):
        if lam_j == 0.0:
            continue
        u, u_weights = _geometric_gauss_rule(lower_j, lam_j)
        kernel = -np.expm1(-np.multiply.outer(z_points, u)) / (mech.b * u + mech.c * u * u)
        phi_values = kernel @ u_weights
        entries[j] = np.sum(phi_values * cell_weights, axis=1)

    offset = _offset(mech, beta, lam, lower)
    sigma = smallest_singular_value(entries)
    label = "inf" if math.isinf(horizon) else f"{horizon:g}"
    logger.info(
        f"Assembled operator T={label} with shape {entries.shape}, smallest singular value {sigma:.3e}"
    )
    return OperatorMatrix(
        horizon=horizon,
        entries=entries,
        offset=offset,
        breakpoints=breakpoints,
        lgrid=lgrid,
        sigma_min=sigma,
    )


def smallest_singular_value(entries: np.ndarray) -> float:
    """sigma_min of the columns; zero when there are fewer rows than columns."""
    entries = np.asarray(entries, dtype=float)
    rows, cols = entries.shape
    if rows < cols:
        return 0.0
    return float(np.linalg.svd(entries, compute_uv=False)[-1])


def model_g(op: OperatorMatrix, k: GriddedDensity) -> np.ndarray:
    """Model log-Laplace curve -offset - A k on the operator's lambda grid."""
    if not k.same_grid(op.breakpoints):
        raise GridMismatchError(
            f"Density with {k.n_cells} cells is not on the operator grid ({op.shape[1]} cells)"
        )
    return op.apply(k.values)


def lipschitz_check(op: OperatorMatrix, k1: GriddedDensity, k2: GriddedDensity) -> Tuple[float, float]:
    """(||T k1 - T k2||_w^2, ||k1 - k2||_mu) for the continuity constant of T."""
    for k in (k1, k2):
        if not k.same_grid(op.breakpoints):
            raise GridMismatchError("lipschitz_check needs both densities on the operator grid")
    difference = op.entries @ (k1.values - k2.values)
    return op.lgrid.norm_sq(difference), mu_distance(k1, k2)


def discretize_density(density, breakpoints) -> GriddedDensity:
    """Cell averages of a jump density on the given grid."""
    breakpoints = np.asarray(breakpoints, dtype=float)
    masses = np.asarray(density.cell_masses(breakpoints), dtype=float)
    return GriddedDensity(breakpoints, masses / np.diff(breakpoints))


def default_envelope(breakpoints, R: float) -> GriddedDensity:
    """R / (2 z_max) * min(1, 1/z^2), evaluated at each cell's left edge so it dominates the curve."""
    breakpoints = np.asarray(breakpoints, dtype=float)
    left = breakpoints[:-1]
    with np.errstate(divide="ignore"):
        decay = np.where(left > 1.0, 1.0 / np.square(left), 1.0)
    return GriddedDensity(breakpoints, R / (2.0 * breakpoints[-1]) * decay)


def default_constraint_set(
    breakpoints, R: float, mode: Union[ConstraintMode, str] = ConstraintMode.MONOTONE
) -> ConstraintSet:
    return ConstraintSet(envelope=default_envelope(breakpoints, R), R=R, mode=ConstraintMode(mode))


def membership_radius(k: GriddedDensity, mode: Union[ConstraintMode, str] = ConstraintMode.BOUNDED_VARIATION) -> float:
    """Smallest R meeting the variation part of the constraint set.

    The maximum total variation over dyadic blocks; in monotone mode a density
    that increases anywhere has no admissible R and gets inf.
    """
    mode = ConstraintMode(mode)
    if mode is ConstraintMode.MONOTONE and k.n_cells > 1 and np.max(np.diff(k.values)) > 1e-9:
        return math.inf
    try:
        blocks = dyadic_blocks(k.breakpoints)
    except GridMismatchError:
        blocks = [np.arange(k.n_cells)]
    return float(max(np.sum(np.abs(np.diff(k.values[block]))) for block in blocks))


def write_density_csv(k: GriddedDensity, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([k.left, k.right, k.values])
    np.savetxt(path, table, delimiter=",", header=CSV_HEADER, comments="", fmt="%.17g")
    return path


def read_density_csv(path: Union[str, Path]) -> GriddedDensity:
    path = Path(path)
    with path.open() as handle:
        header = handle.readline().strip().replace(" ", "")
    if header != CSV_HEADER:
        raise GridMismatchError(f"{path}: expected header '{CSV_HEADER}', found '{header}'")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != 3 or table.shape[0] < 1:
        raise GridMismatchError(f"{path}: expected rows of three columns")
    left, right, values = table.T
    if not np.allclose(left[1:], right[:-1], rtol=1e-12, atol=0.0):
        raise GridMismatchError(f"{path}: cells are not contiguous")
    return GriddedDensity(np.concatenate([left[:1], right]), values)
