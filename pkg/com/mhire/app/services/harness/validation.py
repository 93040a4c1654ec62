import itertools
import logging
import math
from typing import Callable, Dict, Optional

import numpy as np
from scipy import linalg

from com.mhire.app.config.config import Config
from com.mhire.app.services.density_space.density_schema import (
    ConstraintMode,
    ConstraintSet,
    GriddedDensity,
    dyadic_breakpoints,
    trapezoid_grid,
)
from com.mhire.app.services.density_space.density_space import (
    assemble_operator,
    default_constraint_set,
    lipschitz_check,
    model_g,
)
from com.mhire.app.services.density_space.projection import linear_constraints
from com.mhire.app.services.errors import CBIError, ConfigError, FlowDomainError
from com.mhire.app.services.estimator.estimator import fit, xi_diagnostics
from com.mhire.app.services.harness.harness_schema import CheckResult, ValidationReport
from com.mhire.app.services.mechanism_core.mechanism import (
    admissible_lambda_max,
    asymptotic_variance_W,
    stationary_laplace,
    transition_laplace,
    v_flow,
    v_ode,
)
from com.mhire.app.services.mechanism_core.mechanism_schema import (
    AnalyticDensity,
    BranchingMechanism,
    ImmigrationSpec,
)
from com.mhire.app.services.simulator.simulator import one_step_samples, simulate_path
from com.mhire.app.services.simulator.simulator_schema import SimConfig

logger = logging.getLogger(__name__)

FlowFunction = Callable[[BranchingMechanism, float, np.ndarray], np.ndarray]

FLOW_MECHANISMS = (
    BranchingMechanism(b=1.0, c=1.0),
    BranchingMechanism(b=2.0, c=0.5),
    BranchingMechanism(b=0.5, c=0.0),
)
UNIT = BranchingMechanism(b=1.0, c=1.0)
NO_JUMPS = ImmigrationSpec(beta=1.0)
EXPONENTIAL_JUMPS = ImmigrationSpec(beta=1.0, density=AnalyticDensity(family="exponential", rate=1.0, scale=1.0))
# rate 0.3 jumps put the variance domain boundary inside [0, 5]
HEAVY_JUMPS = ImmigrationSpec(beta=1.0, density=AnalyticDensity(family="exponential", rate=0.3, scale=1.0))

# small grid for the brute-force solver comparison: one two-cell block and two single cells
ORACLE_BREAKPOINTS = np.array([0.25, 0.375, 0.5, 1.0, 2.0])
ORACLE_ENVELOPE = np.array([6.0, 6.0, 0.5, 0.1])
ORACLE_R = 1.0

# cells per dyadic block of the two grids whose continuity ratios are compared
REFINEMENT_CELLS = (4, 8)
REFINEMENT_FACTOR = 4.0


def _perturbed_flow(mech: BranchingMechanism, t: float, lam):
    return np.asarray(v_flow(mech, t, lam)) * (1.0 + 1e-6)


FAULTS: Dict[str, FlowFunction] = {"perturbed-flow": _perturbed_flow}


def batch_standard_error(samples: np.ndarray, batches: int = 50) -> float:
    """Standard error of the mean from batch means, robust to serial correlation."""
    samples = np.asarray(samples, dtype=float)
    batches = min(batches, samples.size)
    usable = samples.size // batches * batches
    means = samples[:usable].reshape(batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


def exhaustive_face_search(A, weights, shift, G, h, tol: float = 1e-9) -> np.ndarray:
    """Minimiser of sum w (shift + A k)^2 over {G k <= h} by enumerating faces.

    Each set of at most n independent constraint rows defines an affine face;
    the least-squares point of every face is computed and the best feasible one
    kept. Only viable for a handful of unknowns.
    """
    size = A.shape[1]
    sqrt_w = np.sqrt(weights)
    best, best_value = None, math.inf
    for count in range(size + 1):
        for rows in itertools.combinations(range(G.shape[0]), count):
            rows = list(rows)
            if count:
                face = G[rows]
                if np.linalg.matrix_rank(face) < count:
                    continue
                particular = np.linalg.lstsq(face, h[rows], rcond=None)[0]
                basis = linalg.null_space(face)
            else:
                particular = np.zeros(size)
                basis = np.eye(size)
            candidate = particular
            if basis.shape[1]:
                design = sqrt_w[:, None] * (A @ basis)
                target = -sqrt_w * (shift + A @ particular)
                candidate = particular + basis @ np.linalg.lstsq(design, target, rcond=None)[0]
            if np.any(G @ candidate - h > tol):
                continue
            residual = shift + A @ candidate
            value = float(np.sum(weights * residual * residual))
            if value < best_value:
                best, best_value = candidate, value
    return best


def check_flow_vs_ode(quick: bool, flow: FlowFunction = v_flow) -> CheckResult:
    size = 5 if quick else 20
    grid = np.linspace(0.05, 5.0, size)
    worst = 0.0
    for mech in FLOW_MECHANISMS:
        for t in grid:
            exact = np.asarray(flow(mech, t, grid))
            reference = np.asarray(v_ode(mech, t, grid))
            worst = max(worst, float(np.max(np.abs(exact - reference) / np.abs(reference))))
    status = "pass" if worst <= 1e-8 else "fail"
    return CheckResult(name="flow_vs_rk4", status=status, value=worst, threshold=1e-8,
                       detail=f"max relative gap {worst:.2e} on a {size}x{size} grid")


def check_semigroup(quick: bool, flow: FlowFunction = v_flow) -> CheckResult:
    size = 5 if quick else 20
    grid = np.linspace(0.05, 5.0, size)
    worst = 0.0
    for mech in FLOW_MECHANISMS:
        for t, s in itertools.product(grid, grid):
            joined = np.asarray(flow(mech, t + s, grid))
            composed = np.asarray(flow(mech, t, flow(mech, s, grid)))
            worst = max(worst, float(np.max(np.abs(joined - composed) / np.abs(joined))))
    status = "pass" if worst <= 1e-10 else "fail"
    return CheckResult(name="flow_semigroup", status=status, value=worst, threshold=1e-10,
                       detail=f"max relative gap {worst:.2e}")


def check_stationary_law() -> CheckResult:
    lams = np.round(np.arange(1, 21) * 0.1, 10)
    gaps = [abs(stationary_laplace(UNIT, NO_JUMPS, lam) - 1.0 / (1.0 + lam)) for lam in lams]
    worst = max(gaps)
    status = "pass" if worst <= 1e-6 else "fail"
    return CheckResult(name="stationary_gamma_law", status=status, value=worst, threshold=1e-6,
                       detail=f"max |L - (1+lambda)^-1| = {worst:.2e}")


def check_transition_law(quick: bool, se_multiple: float) -> CheckResult:
    count = 20_000 if quick else 100_000
    worst = 0.0
    for label, imm in (("no jumps", NO_JUMPS), ("exp jumps", EXPONENTIAL_JUMPS)):
        cfg = SimConfig(mech=UNIT, imm=imm, seed=7)
        draws = one_step_samples(cfg, 1.0, count)
        for lam in (0.5, 1.0, 2.0):
            sample = np.exp(-lam * draws)
            se = float(sample.std(ddof=1) / math.sqrt(count))
            target = transition_laplace(UNIT, imm, 1.0, 1.0, lam)
            worst = max(worst, abs(float(sample.mean()) - target) / se)
    status = "pass" if worst <= se_multiple else "fail"
    return CheckResult(name="transition_law_mc", status=status, value=worst, threshold=se_multiple,
                       detail=f"worst gap {worst:.2f} SE over {count} exact draws")


def _random_monotone(envelope: GriddedDensity, rng: np.random.Generator) -> GriddedDensity:
    return envelope.with_values(envelope.values * np.sort(rng.random(envelope.n_cells))[::-1])


def _max_continuity_ratio(op, envelope: GriddedDensity, pairs: int, rng: np.random.Generator) -> float:
    ratios = []
    for _ in range(pairs):
        first, second = lipschitz_check(op, _random_monotone(envelope, rng), _random_monotone(envelope, rng))
        ratios.append(first / second)
    ratios = np.asarray(ratios)
    if not np.all(np.isfinite(ratios)) or np.any(ratios < 0):
        return math.nan
    return float(ratios.max())


def check_operator(quick: bool) -> CheckResult:
    rng = np.random.default_rng(2024)
    lgrid = trapezoid_grid()
    pairs = 20 if quick else 100
    envelopes, ops, max_ratios = {}, {}, {}
    for cells_per_block in REFINEMENT_CELLS:
        breakpoints = dyadic_breakpoints(cells_per_block=cells_per_block)
        envelopes[cells_per_block] = envelope = default_constraint_set(breakpoints, 256.0).envelope
        ops[cells_per_block] = op = assemble_operator(UNIT, 1.0, breakpoints, lgrid, math.inf)
        max_ratios[cells_per_block] = _max_continuity_ratio(op, envelope, pairs, rng)
    coarse, fine = (max_ratios[cells] for cells in REFINEMENT_CELLS)
    spread = max(coarse, fine) / min(coarse, fine) if min(coarse, fine) > 0 else math.inf
    ratios_ok = bool(np.isfinite(spread) and spread <= REFINEMENT_FACTOR)

    op, envelope = ops[REFINEMENT_CELLS[-1]], envelopes[REFINEMENT_CELLS[-1]]
    k1, k2 = _random_monotone(envelope, rng), _random_monotone(envelope, rng)
    alpha = 0.3
    mixed = model_g(op, k1.with_values(alpha * k1.values + (1 - alpha) * k2.values))
    combined = alpha * model_g(op, k1) + (1 - alpha) * model_g(op, k2)
    affinity_gap = float(np.max(np.abs(mixed - combined)))
    affinity_ok = affinity_gap <= 1e-12 * (1.0 + float(np.max(np.abs(combined))))

    small_op = assemble_operator(UNIT, 1.0, dyadic_breakpoints(-2, 2, 1), lgrid, math.inf)
    rank_ok = small_op.sigma_min > 1e-12

    status = "pass" if affinity_ok and rank_ok and ratios_ok else "fail"
    return CheckResult(
        name="operator_properties",
        status=status,
        value=spread,
        threshold=REFINEMENT_FACTOR,
        detail=(f"affinity gap {affinity_gap:.1e}; 4-cell sigma_min {small_op.sigma_min:.2e} "
                f"(default grid {op.sigma_min:.1e}); max continuity ratio {coarse:.3g} at "
                f"{REFINEMENT_CELLS[0]} and {fine:.3g} at {REFINEMENT_CELLS[1]} cells per block"),
    )


def oracle_constraint_set(mode: ConstraintMode) -> ConstraintSet:
    return ConstraintSet(envelope=GriddedDensity(ORACLE_BREAKPOINTS, ORACLE_ENVELOPE), R=ORACLE_R, mode=mode)


def check_solver_oracle(quick: bool) -> CheckResult:
    rng = np.random.default_rng(99)
    lgrid = trapezoid_grid(4.0, 24)
    op = assemble_operator(UNIT, 1.0, ORACLE_BREAKPOINTS, lgrid, math.inf)
    targets = 5 if quick else 20
    worst = 0.0
    for mode in ConstraintMode:
        cs = oracle_constraint_set(mode)
        G, h = linear_constraints(cs)
        for _ in range(targets):
            k_raw = rng.uniform(0.0, 1.5 * ORACLE_ENVELOPE)
            gn = op.apply(k_raw) + rng.normal(0.0, 1e-3, lgrid.size)
            report = fit(gn, op, cs, lgrid)
            oracle = exhaustive_face_search(op.entries, lgrid.weights, gn + op.offset, G, h)
            worst = max(worst, float(np.max(np.abs(np.asarray(report.density_values) - oracle))))
    status = "pass" if worst <= 2e-3 else "fail"
    return CheckResult(name="solver_vs_exhaustive", status=status, value=worst, threshold=2e-3,
                       detail=f"max coordinate gap {worst:.2e} over {2 * targets} fits")


def check_martingale(quick: bool, se_multiple: float) -> CheckResult:
    n = 20_000 if quick else 100_000
    cfg = SimConfig(mech=UNIT, imm=NO_JUMPS, seed=11, x0=1.0)
    series = simulate_path(cfg, n).series
    worst = 0.0
    for lam in (0.25, 0.5, 1.0):
        xi, variance = xi_diagnostics(series, UNIT, NO_JUMPS, lam)
        mean_gap = abs(float(xi.mean())) / batch_standard_error(xi)
        centred = (xi - xi.mean()) ** 2
        variance_gap = abs(variance - asymptotic_variance_W(UNIT, NO_JUMPS, lam)) / batch_standard_error(centred)
        worst = max(worst, mean_gap, variance_gap)
    status = "pass" if worst <= se_multiple else "fail"
    return CheckResult(name="martingale_diagnostics", status=status, value=worst, threshold=se_multiple,
                       detail=f"worst gap {worst:.2f} SE on a path of {n}")


def check_ergodic_convergence(quick: bool) -> CheckResult:
    if quick:
        return CheckResult(name="ergodic_uniform_convergence", status="skip", detail="full mode only")
    lgrid = trapezoid_grid(2.0, 16)
    target = np.array([stationary_laplace(UNIT, EXPONENTIAL_JUMPS, lam) for lam in lgrid.nodes])
    sizes = (1_000, 10_000, 100_000)
    replicates = 20
    decreasing = 0
    for replicate in range(replicates):
        cfg = SimConfig(mech=UNIT, imm=EXPONENTIAL_JUMPS, seed=13)
        values = simulate_path(cfg, sizes[-1], substream=(replicate,)).series.values[1:]
        gaps = [
            float(np.max(np.abs(np.exp(-np.multiply.outer(lgrid.nodes, values[:size])).mean(axis=1) - target)))
            for size in sizes
        ]
        decreasing += int(gaps[0] > gaps[1] > gaps[2])
    status = "pass" if decreasing >= 18 else "fail"
    return CheckResult(name="ergodic_uniform_convergence", status=status, value=float(decreasing), threshold=18.0,
                       detail=f"sup-gap decreasing in {decreasing}/{replicates} replicates")


def check_variance_domain() -> CheckResult:
    nodes = np.linspace(0.0, 5.0, 11)
    limit = admissible_lambda_max(UNIT, HEAVY_JUMPS, float(nodes[-1]))
    rejected, finite = [], True
    for lam in nodes:
        try:
            value = asymptotic_variance_W(UNIT, HEAVY_JUMPS, float(lam))
            finite = finite and math.isfinite(value)
        except FlowDomainError:
            rejected.append(float(lam))
    guarded = bool(rejected) and min(rejected) >= limit and finite
    status = "pass" if guarded else "fail"
    return CheckResult(name="variance_domain_guard", status=status, value=limit,
                       detail=f"admissible lambda up to {limit:.4g}; rejected nodes {rejected}")


def run_validation(quick: bool = True, fault: Optional[str] = None) -> ValidationReport:
    """Run the invariant suite; ``fault`` injects a known defect to exercise the harness."""
    if fault is not None and fault not in FAULTS:
        raise ConfigError(f"Unknown fault mode '{fault}'; expected one of {sorted(FAULTS)}")
    flow = FAULTS.get(fault, v_flow)
    se_multiple = Config().se_multiple
    checks = [
        ("flow_vs_rk4", lambda: check_flow_vs_ode(quick, flow)),
        ("flow_semigroup", lambda: check_semigroup(quick, flow)),
        ("stationary_gamma_law", check_stationary_law),
        ("transition_law_mc", lambda: check_transition_law(quick, se_multiple)),
        ("operator_properties", lambda: check_operator(quick)),
        ("solver_vs_exhaustive", lambda: check_solver_oracle(quick)),
        ("martingale_diagnostics", lambda: check_martingale(quick, se_multiple)),
        ("ergodic_uniform_convergence", lambda: check_ergodic_convergence(quick)),
        ("variance_domain_guard", check_variance_domain),
    ]
    report = ValidationReport(mode="quick" if quick else "full", fault=fault)
    for name, check in checks:
        try:
            result = check()
        except CBIError as e:
            logger.error(f"Validation check raised {e.error_type}: {e}")
            result = CheckResult(name=name, status="fail",
                                 detail=f"{e.error_type}: {e}")
        logger.info(f"{result.name}: {result.status} ({result.detail})")
        report.checks.append(result)
    return report
