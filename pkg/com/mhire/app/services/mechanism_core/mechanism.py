import logging
import math
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from com.mhire.app.config.config import Config
from com.mhire.app.services.errors import FlowDomainError, QuadratureError
from com.mhire.app.services.mechanism_core.mechanism_schema import BranchingMechanism, ImmigrationSpec

logger = logging.getLogger(__name__)


def _scalar_or_array(value):
    value = np.asarray(value, dtype=float)
    return float(value) if value.ndim == 0 else value


def adaptive_quad(func: Callable[[float], float], lo: float, hi: float, what: str) -> float:
    """scipy's adaptive Gauss-Kronrod quadrature with the configured tolerances."""
    config = Config()
    result = integrate.quad(
        func,
        lo,
        hi,
        epsabs=config.quad_epsabs,
        epsrel=config.quad_epsrel,
        limit=config.quad_limit,
        full_output=1,
    )
    if len(result) > 3 or not np.isfinite(result[0]):
        message = result[3] if len(result) > 3 else "non-finite value"
        logger.error(f"Quadrature failed for {what} on [{lo}, {hi}]: {message}")
        raise QuadratureError(f"Quadrature failed for {what} on [{lo}, {hi}]: {message}")
    return float(result[0])


def phi(mech: BranchingMechanism, z):
    """Branching mechanism phi(z) = b z + c z^2."""
    z = np.asarray(z, dtype=float)
    return _scalar_or_array(mech.b * z + mech.c * z ** 2)


def psi(imm: ImmigrationSpec, z):
    """Immigration mechanism psi(z) = beta z + int (1 - e^{-z u}) k(u) du.

    Defined for z >= 0 and, when the jump density has exponential moments, on
    (domain_lower, 0) as well.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z <= imm.density.domain_lower):
        raise FlowDomainError(
            f"psi is infinite for z <= {imm.density.domain_lower:g} (jump density has no such exponential moment)"
        )
    return _scalar_or_array(imm.beta * z + imm.density.laplace_exponent(z))


def lambda_min(mech: BranchingMechanism, t: float) -> float:
    """Infimum of lambda for which v_t(lambda) is defined."""
    if t == 0 or mech.c == 0:
        return -math.inf
    if math.isinf(t):
        return -mech.b / mech.c
    return -mech.b / (mech.c * -math.expm1(-mech.b * t))


def v_flow(mech: BranchingMechanism, t: float, lam):
    """Closed-form cumulant flow v_t(lambda) solving dv/dt = -phi(v), v_0 = lambda."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    lam = np.asarray(lam, dtype=float)
    if t == 0:
        return _scalar_or_array(lam)
    if np.any(lam <= lambda_min(mech, t)):
        raise FlowDomainError(f"lambda must exceed {lambda_min(mech, t):.6g} for t={t}")
    if math.isinf(t):
        return _scalar_or_array(np.zeros_like(lam))
    decay = math.exp(-mech.b * t)
    if mech.c == 0:
        return _scalar_or_array(decay * lam)
    denominator = 1.0 + (mech.c * lam / mech.b) * -math.expm1(-mech.b * t)
    if np.any(denominator <= 0):
        raise FlowDomainError(f"Flow denominator is not positive for t={t}")
    return _scalar_or_array(decay * lam / denominator)


def v_ode(mech: BranchingMechanism, t: float, lam, step: float = 1e-3):
    """Classical RK4 integration of dv/ds = -phi(v); an independent check on v_flow."""
    if step <= 0:
        raise ValueError("step must be positive")
    if t < 0 or math.isinf(t):
        raise ValueError("v_ode needs a finite nonnegative horizon")
    v = np.array(lam, dtype=float)
    if t == 0:
        return _scalar_or_array(v)
    if np.any(v <= lambda_min(mech, t)):
        raise FlowDomainError(f"lambda must exceed {lambda_min(mech, t):.6g} for t={t}")

    def rhs(x):
        return -(mech.b * x + mech.c * x * x)

    n_steps = max(1, math.ceil(t / step))
    h = t / n_steps
    for _ in range(n_steps):
        k1 = rhs(v)
        k2 = rhs(v + 0.5 * h * k1)
        k3 = rhs(v + 0.5 * h * k2)
        k4 = rhs(v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(v)):
            raise FlowDomainError("RK4 trajectory left the flow domain")
    return _scalar_or_array(v)


def _psi_over_phi_integral(mech: BranchingMechanism, imm: ImmigrationSpec, lo: float, hi: float) -> float:
    # psi(u)/phi(u) -> (beta + mean jump)/b as u -> 0
    limit = (imm.beta + imm.density.mean()) / mech.b

    def integrand(u: float) -> float:
        if u == 0.0:
            return limit
        return psi(imm, u) / phi(mech, u)

    return adaptive_quad(integrand, lo, hi, "int psi/phi")


def check_ergodicity(mech: BranchingMechanism, imm: ImmigrationSpec, lam: float = 1.0) -> float:
    """int_0^lambda psi(z)/phi(z) dz; a finite value certifies ergodicity."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    value = _psi_over_phi_integral(mech, imm, 0.0, lam)
    if not np.isfinite(value):
        raise QuadratureError("int psi/phi diverges at 0; the process is not ergodic")
    return value


def psi_time_integral_direct(mech: BranchingMechanism, imm: ImmigrationSpec, t: float, lam: float) -> float:
    """int_0^t psi(v_s(lambda)) ds by quadrature in time.

    The infinite horizon is truncated where the integrand has decayed below the
    tail tolerance; the remaining geometric tail psi(v_S)/b is added back.
    """
    if lam == 0:
        return 0.0
    if lam <= lambda_min(mech, t) or lam <= imm.density.domain_lower:
        raise FlowDomainError(f"lambda={lam:g} is outside the flow domain for t={t}")

    def integrand(s: float) -> float:
        return psi(imm, v_flow(mech, s, lam))

    if not math.isinf(t):
        return adaptive_quad(integrand, 0.0, t, "int psi(v_s) ds")

    tail_tol = Config().tail_tol
    horizon = 1.0
    while abs(integrand(horizon)) / mech.b > tail_tol and horizon < 2.0 ** 12:
        horizon *= 2.0
    body = adaptive_quad(integrand, 0.0, horizon, "int psi(v_s) ds")
    return body + integrand(horizon) / mech.b


def psi_time_integral(mech: BranchingMechanism, imm: ImmigrationSpec, t: float, lam: float) -> float:
    """int_0^t psi(v_s(lambda)) ds for t in (0, inf].

    For lambda > 0 the substitution u = v_s(lambda), du = -phi(u) ds turns this
    into int_{v_t(lambda)}^{lambda} psi(u)/phi(u) du over a bounded interval.
    Negative lambda goes through the time-domain quadrature.
    """
    if not t > 0:
        raise ValueError("t must lie in (0, inf]")
    if lam == 0:
        return 0.0
    if lam > 0:
        if math.isinf(t):
            return check_ergodicity(mech, imm, lam)
        return _psi_over_phi_integral(mech, imm, v_flow(mech, t, lam), lam)
    return psi_time_integral_direct(mech, imm, t, lam)


def transition_laplace(mech: BranchingMechanism, imm: ImmigrationSpec, x: float, t: float, lam: float) -> float:
    """E[exp(-lambda X_t) | X_0 = x]."""
    if x < 0 or lam < 0:
        raise ValueError("x and lambda must be nonnegative")
    if not t > 0:
        raise ValueError("t must be positive")
    return math.exp(-x * v_flow(mech, t, lam) - psi_time_integral(mech, imm, t, lam))


def stationary_laplace(mech: BranchingMechanism, imm: ImmigrationSpec, lam: float) -> float:
    """Laplace transform of the stationary law, exp(-int_0^inf psi(v_s(lambda)) ds)."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return math.exp(-psi_time_integral(mech, imm, math.inf, lam))


def stationary_mean(mech: BranchingMechanism, imm: ImmigrationSpec) -> float:
    return (imm.beta + imm.density.mean()) / mech.b


def _variance_shift(mech: BranchingMechanism, lam: float, delta: float) -> float:
    return v_flow(mech, delta, 2.0 * lam) - 2.0 * v_flow(mech, delta, lam)


def _variance_lower_bound(mech: BranchingMechanism, imm: ImmigrationSpec) -> float:
    return max(lambda_min(mech, math.inf), imm.density.domain_lower)


def asymptotic_variance_W(mech: BranchingMechanism, imm: ImmigrationSpec, lam: float, delta: float = 1.0) -> float:
    """Stationary variance of xi_k(lambda) = exp(-lambda X_k + X_{k-1} v(lambda) + I(lambda)) - 1.

    W = L_eta(v(2 lambda) - 2 v(lambda)) * exp(-I(2 lambda) + 2 I(lambda)) - 1 with
    I(.) = int_0^delta psi(v_s(.)) ds and v = v_delta.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return 0.0
    shifted = _variance_shift(mech, lam, delta)
    bound = _variance_lower_bound(mech, imm)
    if shifted <= bound:
        raise FlowDomainError(
            f"v(2*{lam:g}) - 2 v({lam:g}) = {shifted:.6g} is below {bound:.6g}; "
            f"restrict the weight support to [0, admissible_lambda_max]"
        )
    exponent = (
        -psi_time_integral(mech, imm, math.inf, shifted)
        - psi_time_integral(mech, imm, delta, 2.0 * lam)
        + 2.0 * psi_time_integral(mech, imm, delta, lam)
    )
    return math.expm1(exponent)


def admissible_lambda_max(
    mech: BranchingMechanism, imm: ImmigrationSpec, lam_max: float, delta: float = 1.0
) -> float:
    """Largest A <= lam_max with v(2 lambda) - 2 v(lambda) inside the stationary domain on [0, A]."""
    bound = _variance_lower_bound(mech, imm)

    def gap(lam: float) -> float:
        return _variance_shift(mech, lam, delta) - bound

    if gap(lam_max) > 0:
        return float(lam_max)
    root = optimize.brentq(gap, 0.0, lam_max, xtol=1e-12)
    logger.info(f"Variance domain ends at lambda={root:.6g} (requested {lam_max:g})")
    return float(root)
