import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg, special

from com.mhire.app.config.config import Config
from com.mhire.app.services.density_space.density_schema import (
    ConstraintMode,
    ConstraintSet,
    LambdaGrid,
    OperatorMatrix,
)
from com.mhire.app.services.density_space.density_space import membership_radius, smallest_singular_value
from com.mhire.app.services.density_space.projection import linear_constraints, project_values
from com.mhire.app.services.errors import ConvergenceError, GridMismatchError, OverflowGuardError
from com.mhire.app.services.estimator.estimator_schema import (
    EmpiricalTransforms,
    EstimateReport,
    FitOptions,
    ObservationSeries,
)
from com.mhire.app.services.mechanism_core.mechanism import asymptotic_variance_W, psi_time_integral, v_flow
from com.mhire.app.services.mechanism_core.mechanism_schema import BranchingMechanism, ImmigrationSpec

logger = logging.getLogger(__name__)

# Largest exponent accepted before exp overflows a double
EXPONENT_GUARD = 709.0
ACTIVE_TOL = 1e-7
FEASIBLE_TOL = 1e-9
RANK_TOL = 1e-12
POLISH_ROUNDS = 3


def _log_mean_exp(exponents: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    result = special.logsumexp(exponents, axis=1) - np.log(exponents.shape[1])
    result[nodes == 0.0] = 0.0
    return result


def empirical_g1(series: ObservationSeries, lgrid: LambdaGrid) -> np.ndarray:
    """ln((1/n) sum_{k=1}^n exp(-lambda X_k)); X_0 is left out."""
    exponents = -np.multiply.outer(lgrid.nodes, series.values[1:])
    return _log_mean_exp(exponents, lgrid.nodes)


def empirical_g2(series: ObservationSeries, lgrid: LambdaGrid, mech: BranchingMechanism) -> np.ndarray:
    """ln((1/n) sum_{k=1}^n exp(-lambda X_k + X_{k-1} v_delta(lambda)))."""
    v = np.asarray(v_flow(mech, series.delta, lgrid.nodes), dtype=float)
    exponents = -np.multiply.outer(lgrid.nodes, series.values[1:]) + np.multiply.outer(v, series.values[:-1])
    largest = float(np.max(exponents))
    if largest > EXPONENT_GUARD:
        raise OverflowGuardError(
            f"Exponent {largest:.4g} in the one-step transform exceeds {EXPONENT_GUARD:g}"
        )
    return _log_mean_exp(exponents, lgrid.nodes)


def empirical_transforms(series: ObservationSeries, lgrid: LambdaGrid, mech: BranchingMechanism) -> EmpiricalTransforms:
    return EmpiricalTransforms(
        g1n=empirical_g1(series, lgrid),
        g2n=empirical_g2(series, lgrid, mech),
        n=series.n,
    )


class _WeightedQuadratic:
    """f(k) = 1/2 sum_j w_j (gn_j + o_j + (A k)_j)^2."""

    def __init__(self, gn: np.ndarray, op: OperatorMatrix, weights: np.ndarray):
        self.A = op.entries
        self.w = weights
        self.shift = gn + op.offset
        hessian = self.A.T @ (self.w[:, None] * self.A)
        self.lipschitz = float(np.linalg.eigvalsh(hessian)[-1]) if hessian.size else 0.0

    def residual(self, k: np.ndarray) -> np.ndarray:
        return self.shift + self.A @ k

    def value(self, k: np.ndarray) -> float:
        r = self.residual(k)
        return 0.5 * float(np.sum(self.w * r * r))

    def gradient(self, k: np.ndarray) -> np.ndarray:
        return self.A.T @ (self.w * self.residual(k))


class AcceleratedProjectedGradient:
    """FISTA with a monotone restart on the discretised constraint set.

    Stops once the fixed-point residual max|k - P(k - grad f(k)/L)| is at most
    ``tol``. The residual is evaluated whenever a step is that small, every
    ``check_every`` iterations and at the iteration cap; under momentum the
    step can stay above ``tol`` after the residual has dropped below it.

    Every ``polish_every`` iterations the iterate's active face is solved exactly
    by equality-constrained least squares; the polished point is kept when it is
    feasible, no worse and meets the residual tolerance.
    """

    def __init__(
        self,
        cs: ConstraintSet,
        tol: float,
        max_iter: int,
        polish: bool = True,
        polish_every: int = 200,
        check_every: int = 25,
    ):
        self.cs = cs
        self.tol = tol
        self.max_iter = max_iter
        self.polish = polish
        self.polish_every = polish_every
        self.check_every = check_every
        self._constraints = None
        self.history: List[float] = []

    def _project(self, values: np.ndarray) -> np.ndarray:
        return project_values(values, self.cs)

    def fixed_point_residual(self, quadratic: _WeightedQuadratic, k: np.ndarray) -> float:
        if quadratic.lipschitz <= 0:
            return 0.0
        step = self._project(k - quadratic.gradient(k) / quadratic.lipschitz)
        return float(np.max(np.abs(k - step)))

    def constraints(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._constraints is None:
            self._constraints = linear_constraints(self.cs)
        return self._constraints

    def _polish(self, quadratic: _WeightedQuadratic, k: np.ndarray) -> Optional[np.ndarray]:
        try:
            G, h = self.constraints()
        except ValueError as e:
            logger.warning(f"Active-face polishing disabled: {e}")
            self.polish = False
            return None
        active = G @ k - h >= -ACTIVE_TOL
        sqrt_w = np.sqrt(quadratic.w)
        for _ in range(POLISH_ROUNDS):
            if np.any(active):
                particular = np.linalg.lstsq(G[active], h[active], rcond=None)[0]
                basis = linalg.null_space(G[active])
            else:
                particular = np.zeros_like(k)
                basis = np.eye(k.size)
            candidate = particular
            if basis.shape[1] > 0:
                design = sqrt_w[:, None] * (quadratic.A @ basis)
                target = -sqrt_w * quadratic.residual(particular)
                candidate = particular + basis @ np.linalg.lstsq(design, target, rcond=None)[0]
            violated = G @ candidate - h > FEASIBLE_TOL
            if not np.any(violated):
                candidate = np.clip(candidate, 0.0, self.cs.upper)
                current = quadratic.value(k)
                if quadratic.value(candidate) > current + 1e-14 * max(1.0, current):
                    return None
                if self.fixed_point_residual(quadratic, candidate) > self.tol:
                    return None
                return candidate
            active |= violated
        return None

    def solve(self, quadratic: _WeightedQuadratic, start: np.ndarray) -> Tuple[np.ndarray, int, float]:
        x = self._project(start)
        self.history = [quadratic.value(x)]
        if quadratic.lipschitz <= 0:
            return x, 0, 0.0
        inverse_l = 1.0 / quadratic.lipschitz
        y = x.copy()
        momentum = 1.0
        for iteration in range(1, self.max_iter + 1):
            x_next = self._project(y - inverse_l * quadratic.gradient(y))
            if quadratic.value(x_next) > self.history[-1]:
                # restart: plain projected-gradient step from x
                momentum = 1.0
                x_next = self._project(x - inverse_l * quadratic.gradient(x))
                y_next = x_next
            else:
                momentum_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum))
                y_next = x_next + ((momentum - 1.0) / momentum_next) * (x_next - x)
                momentum = momentum_next
            step = float(np.max(np.abs(x_next - x)))
            x, y = x_next, y_next
            self.history.append(quadratic.value(x))

            if step <= self.tol or iteration % self.check_every == 0 or iteration == self.max_iter:
                residual = self.fixed_point_residual(quadratic, x)
                if residual <= self.tol:
                    polished = self._polish(quadratic, x) if self.polish else None
                    if polished is not None:
                        self.history.append(quadratic.value(polished))
                        return polished, iteration, self.fixed_point_residual(quadratic, polished)
                    return x, iteration, residual
            if self.polish and iteration % self.polish_every == 0:
                polished = self._polish(quadratic, x)
                if polished is not None:
                    self.history.append(quadratic.value(polished))
                    return polished, iteration, self.fixed_point_residual(quadratic, polished)

        if self.polish:
            polished = self._polish(quadratic, x)
            if polished is not None:
                self.history.append(quadratic.value(polished))
                return polished, self.max_iter, self.fixed_point_residual(quadratic, polished)
        residual = self.fixed_point_residual(quadratic, x)
        if residual <= self.tol:
            return x, self.max_iter, residual
        logger.error(f"Projected gradient stopped at {self.max_iter} iterations with residual {residual:.3e}")
        raise ConvergenceError(
            f"Solver did not reach tolerance {self.tol:g} in {self.max_iter} iterations (residual {residual:.3e})"
        )


def _check_grids(gn: np.ndarray, op: OperatorMatrix, cs: ConstraintSet, lgrid: LambdaGrid) -> None:
    if gn.shape != (lgrid.size,):
        raise GridMismatchError(f"Empirical curve of length {gn.size} does not match {lgrid.size} lambda nodes")
    if op.lgrid.size != lgrid.size or not np.allclose(op.lgrid.nodes, lgrid.nodes, rtol=1e-12, atol=0.0):
        raise GridMismatchError("Operator was assembled on a different lambda grid")
    if not cs.envelope.same_grid(op.breakpoints):
        raise GridMismatchError("Constraint set and operator use different z-grids")


def _boundary_active(cs: ConstraintSet, k: np.ndarray) -> bool:
    """True when k-hat touches the box [0, envelope] or, in bounded-variation mode, a block budget R.

    Ties between neighbours in monotone mode do not count.
    """
    if np.any(k <= ACTIVE_TOL) or np.any(k >= cs.upper - ACTIVE_TOL):
        return True
    if cs.mode is ConstraintMode.BOUNDED_VARIATION:
        return bool(np.any(cs.block_variation(k) >= cs.R - ACTIVE_TOL))
    return False


def fit(
    gn,
    op: OperatorMatrix,
    cs: ConstraintSet,
    lgrid: LambdaGrid,
    opts: Optional[FitOptions] = None,
    route: str = "g1",
) -> EstimateReport:
    """Weighted least-squares projection of an empirical log-Laplace curve onto the model class.

    Minimises sum_j w_j (gn_j + o_j + (A k)_j)^2 over the discretised constraint set
    and returns k-hat together with g-hat = -o - A k-hat.
    """
    config = Config()
    opts = opts or FitOptions()
    tol = opts.tol if opts.tol is not None else config.solver_tol
    max_iter = opts.max_iter if opts.max_iter is not None else config.solver_max_iter

    gn = np.asarray(gn, dtype=float)
    if not np.all(np.isfinite(gn)):
        raise ValueError("Empirical curve must be finite")
    _check_grids(gn, op, cs, lgrid)

    quadratic = _WeightedQuadratic(gn, op, lgrid.weights)
    solver = AcceleratedProjectedGradient(cs, tol, max_iter, polish=opts.polish, polish_every=opts.polish_every,
                                          check_every=opts.check_every)
    k_hat, iterations, residual = solver.solve(quadratic, np.zeros(cs.upper.size))

    flags = []
    sigma = op.sigma_min if op.sigma_min is not None else smallest_singular_value(op.entries)
    if sigma < RANK_TOL:
        logger.warning(f"Operator sigma_min={sigma:.3e}; k-hat is not unique on this grid")
        flags.append("non_unique")
    if _boundary_active(cs, k_hat):
        flags.append("boundary_solution")

    g_hat = op.apply(k_hat)
    objective = 2.0 * quadratic.value(k_hat)
    logger.info(f"Fit ({route}) converged in {iterations} iterations, objective {objective:.6e}")
    return EstimateReport(
        route=route,
        grid=op.breakpoints.tolist(),
        density_values=k_hat.tolist(),
        lambda_nodes=lgrid.nodes.tolist(),
        g_hat=g_hat.tolist(),
        objective=objective,
        iterations=iterations,
        kkt_residual=residual,
        flags=flags,
        membership_radius=membership_radius(cs.envelope.with_values(k_hat), cs.mode),
        sigma_min=sigma,
    )


def xi_diagnostics(
    series: ObservationSeries, mech: BranchingMechanism, imm: ImmigrationSpec, lam: float
) -> Tuple[np.ndarray, float]:
    """xi_k = exp(-lambda X_k + X_{k-1} v(lambda) + I(lambda)) - 1 and its sample variance.

    A martingale-difference sequence under the true (mech, imm).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return np.zeros(series.n), 0.0
    v = v_flow(mech, series.delta, lam)
    integral = psi_time_integral(mech, imm, series.delta, lam)
    xi = np.expm1(-lam * series.values[1:] + v * series.values[:-1] + integral)
    variance = float(np.var(xi, ddof=1)) if xi.size > 1 else 0.0
    return xi, variance


def risk_statistic(
    report: EstimateReport, truth_g, lgrid: LambdaGrid, n: int, gn=None
) -> float:
    """n * ||g-hat - g||_w^2; with ``gn`` the projection inequality is checked as well."""
    g_hat = np.asarray(report.g_hat, dtype=float)
    truth_g = np.asarray(truth_g, dtype=float)
    statistic = n * lgrid.norm_sq(g_hat - truth_g)
    if gn is not None:
        lhs, rhs, holds = projection_inequality(report, gn, truth_g, lgrid)
        if not holds:
            logger.warning(f"||g_hat - g||^2 = {lhs:.6e} exceeds 4 ||gn - g||^2 = {rhs:.6e}")
    return float(statistic)


def projection_inequality(
    report: EstimateReport, gn, truth_g, lgrid: LambdaGrid, slack: float = 1e-9
) -> Tuple[float, float, bool]:
    """(||g-hat - g||_w^2, 4 ||gn - g||_w^2, lhs <= rhs) for a truth inside the model class."""
    g_hat = np.asarray(report.g_hat, dtype=float)
    truth_g = np.asarray(truth_g, dtype=float)
    lhs = lgrid.norm_sq(g_hat - truth_g)
    rhs = 4.0 * lgrid.norm_sq(np.asarray(gn, dtype=float) - truth_g)
    return lhs, rhs, bool(lhs <= rhs * (1.0 + slack) + 1e-12)


def risk_bound_constant(
    mech: BranchingMechanism, imm: ImmigrationSpec, lgrid: LambdaGrid, delta: float = 1.0
) -> float:
    """sum_j w_j W(lambda_j), the quadrature of int W(lambda) w(lambda) d lambda."""
    return float(sum(
        weight * asymptotic_variance_W(mech, imm, lam, delta)
        for lam, weight in zip(lgrid.nodes, lgrid.weights)
        if weight > 0
    ))
