import itertools
import logging
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import optimize

from com.mhire.app.config.config import Config
from com.mhire.app.services.density_space.density_schema import ConstraintMode, ConstraintSet, GriddedDensity
from com.mhire.app.services.errors import ConvergenceError, GridMismatchError

logger = logging.getLogger(__name__)

# Sign patterns grow as 2^(cells - 1) per block
MAX_ENUMERATED_BLOCK = 16


def total_variation(values: np.ndarray) -> float:
    return float(np.sum(np.abs(np.diff(values))))


def _difference_matrix(size: int) -> np.ndarray:
    return np.diff(np.eye(size), axis=0)


def tv_prox(values: np.ndarray, tau: float) -> np.ndarray:
    """argmin_x 1/2 ||x - y||^2 + tau TV(x), through its box-constrained dual.

    The dual is min_u 1/2 ||D^T u - y||^2 over |u| <= tau, and x = y - D^T u.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2 or tau <= 0:
        return values.copy()
    difference_t = _difference_matrix(values.size).T
    dual = optimize.lsq_linear(difference_t, values, bounds=(-tau, tau), method="bvls", tol=1e-14)
    return values - difference_t @ dual.x


def tv_ball_projection(values: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto {x : TV(x) <= radius}.

    The projection is prox_{tau TV} for the tau at which the variation equals the
    radius; tau is bracketed by the largest centred partial sum, beyond which the
    prox is the constant mean.
    """
    values = np.asarray(values, dtype=float)
    if total_variation(values) <= radius:
        return values.copy()
    if radius <= 0:
        return np.full_like(values, values.mean())
    tau_max = float(np.max(np.abs(np.cumsum(values - values.mean())[:-1])))

    def excess(tau: float) -> float:
        return total_variation(tv_prox(values, tau)) - radius

    tau = optimize.brentq(excess, 0.0, tau_max, xtol=1e-14)
    return tv_prox(values, tau)


def _nonincreasing(values: np.ndarray) -> np.ndarray:
    # pool-adjacent-violators
    return optimize.isotonic_regression(values, increasing=False).x


def _shape_projection(cs: ConstraintSet) -> Callable[[np.ndarray], np.ndarray]:
    if cs.mode is ConstraintMode.MONOTONE:
        return _nonincreasing

    def per_block(values: np.ndarray) -> np.ndarray:
        result = values.copy()
        for block in cs.blocks:
            result[block] = tv_ball_projection(values[block], cs.R)
        return result

    return per_block


def project_values(
    values: np.ndarray,
    cs: ConstraintSet,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> np.ndarray:
    """Euclidean projection of a values vector onto the discretised constraint set.

    Dykstra alternation between the shape constraint (nonincreasing cone, or the
    per-block variation balls) and the box [0, envelope].
    """
    config = Config()
    tol = config.projection_tol if tol is None else tol
    max_iter = config.projection_max_iter if max_iter is None else max_iter

    values = np.asarray(values, dtype=float)
    if values.shape != cs.upper.shape:
        raise GridMismatchError(f"Vector of length {values.size} does not match {cs.upper.size} cells")
    if not np.all(np.isfinite(values)):
        raise ValueError("Projection input must be finite")
    if cs.violation(values) <= 0.0:
        return values.copy()

    shape_projection = _shape_projection(cs)
    x = values.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_iter):
        y = shape_projection(x + p)
        p = x + p - y
        x_next = np.clip(y + q, 0.0, cs.upper)
        q = y + q - x_next
        change = float(np.max(np.abs(x_next - x)))
        x = x_next
        if change <= tol and cs.violation(x) <= tol:
            return x
    logger.error(f"Dykstra projection stopped after {max_iter} iterations (violation {cs.violation(x):.3e})")
    raise ConvergenceError(f"Projection did not converge within {max_iter} iterations")


def project(k0, cs: ConstraintSet) -> GriddedDensity:
    """Project a values vector (or density on the same grid) onto the constraint set."""
    if isinstance(k0, GriddedDensity):
        if not k0.same_grid(cs.breakpoints):
            raise GridMismatchError("Density grid does not match the constraint set grid")
        k0 = k0.values
    return GriddedDensity(cs.breakpoints, project_values(k0, cs))


def linear_constraints(cs: ConstraintSet) -> Tuple[np.ndarray, np.ndarray]:
    """Inequality form G x <= h of the constraint set.

    The variation condition of a block is written with one row per sign pattern
    of its differences, which limits this to small blocks.
    """
    size = cs.upper.size
    identity = np.eye(size)
    rows = [-identity, identity]
    bounds = [np.zeros(size), cs.upper.copy()]
    if cs.mode is ConstraintMode.MONOTONE:
        if size > 1:
            rows.append(_difference_matrix(size))
            bounds.append(np.zeros(size - 1))
    else:
        for block in cs.blocks:
            if block.size < 2:
                continue
            if block.size > MAX_ENUMERATED_BLOCK:
                raise ValueError(f"Block of {block.size} cells is too large for sign-pattern enumeration")
            block_difference = np.zeros((block.size - 1, size))
            block_difference[:, block] = _difference_matrix(block.size)
            signs = np.array(list(itertools.product((-1.0, 1.0), repeat=block.size - 1)))
            rows.append(signs @ block_difference)
            bounds.append(np.full(signs.shape[0], cs.R))
    return np.vstack(rows), np.concatenate(bounds)
