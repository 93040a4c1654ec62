import math

import numpy as np
import pytest

from com.mhire.app.services.errors import FlowDomainError, QuadratureError
from com.mhire.app.services.mechanism_core.mechanism import (
    adaptive_quad,
    admissible_lambda_max,
    asymptotic_variance_W,
    check_ergodicity,
    lambda_min,
    phi,
    psi,
    psi_time_integral,
    psi_time_integral_direct,
    stationary_laplace,
    stationary_mean,
    transition_laplace,
    v_flow,
    v_ode,
)
from com.mhire.app.services.mechanism_core.mechanism_schema import (
    AnalyticDensity,
    BranchingMechanism,
    ImmigrationSpec,
)

LAMBDAS = np.array([0.1, 0.5, 1.0, 2.0, 5.0])


def test_phi_is_quadratic(unit_mech):
    assert phi(unit_mech, 2.0) == pytest.approx(6.0)
    assert phi(BranchingMechanism(b=2.0, c=0.0), 3.0) == pytest.approx(6.0)


def test_psi_closed_form_with_exponential_jumps(exp_jumps):
    z = np.array([0.0, 0.5, 2.0])
    expected = z + z / (1.0 + z)
    np.testing.assert_allclose(psi(exp_jumps, z), expected, rtol=1e-14)


def test_psi_rejects_arguments_without_exponential_moment(exp_jumps, no_jumps):
    with pytest.raises(FlowDomainError):
        psi(exp_jumps, -1.0)
    assert psi(no_jumps, -5.0) == pytest.approx(-5.0)


def test_gamma_family_laplace_exponent_matches_quadrature():
    density = AnalyticDensity(family="gamma", shape=0.5, rate=2.0, scale=1.5)
    for z in (0.3, 1.0, 4.0):
        reference = adaptive_quad(lambda u: (1.0 - math.exp(-z * u)) * float(density.pdf(u)), 0.0, math.inf, "test")
        assert float(density.laplace_exponent(z)) == pytest.approx(reference, rel=1e-7)


@pytest.mark.parametrize("mech", [
    BranchingMechanism(b=1.0, c=1.0),
    BranchingMechanism(b=2.0, c=0.5),
    BranchingMechanism(b=0.5, c=0.0),
])
def test_flow_matches_rk4(mech):
    for t in (0.1, 1.0, 5.0):
        np.testing.assert_allclose(v_flow(mech, t, LAMBDAS), v_ode(mech, t, LAMBDAS), rtol=1e-8)


def test_flow_semigroup(unit_mech):
    for t, s in ((0.3, 0.7), (1.0, 2.5), (4.0, 0.01)):
        np.testing.assert_allclose(
            v_flow(unit_mech, t + s, LAMBDAS), v_flow(unit_mech, t, v_flow(unit_mech, s, LAMBDAS)), rtol=1e-12
        )


def test_flow_limits(unit_mech):
    assert v_flow(unit_mech, 0.0, 1.5) == 1.5
    assert v_flow(unit_mech, math.inf, 1.5) == 0.0
    assert v_flow(BranchingMechanism(b=2.0, c=0.0), 1.0, 3.0) == pytest.approx(3.0 * math.exp(-2.0))


def test_flow_domain(unit_mech):
    bound = lambda_min(unit_mech, 1.0)
    assert bound == pytest.approx(-1.0 / (1.0 - math.exp(-1.0)))
    assert lambda_min(unit_mech, math.inf) == -1.0
    assert lambda_min(BranchingMechanism(b=1.0, c=0.0), 1.0) == -math.inf
    with pytest.raises(FlowDomainError):
        v_flow(unit_mech, 1.0, bound - 0.01)
    assert math.isfinite(v_flow(unit_mech, 1.0, bound + 0.01))


def test_stationary_law_is_gamma_without_jumps(unit_mech, no_jumps):
    for lam in np.arange(1, 21) * 0.1:
        assert stationary_laplace(unit_mech, no_jumps, lam) == pytest.approx(1.0 / (1.0 + lam), abs=1e-10)


def test_stationary_law_with_exponential_jumps(unit_mech, exp_jumps):
    # int_0^lam psi/phi = log(1 + lam) + lam / (1 + lam)
    for lam in (0.25, 1.0, 3.0):
        expected = math.exp(-lam / (1.0 + lam)) / (1.0 + lam)
        assert stationary_laplace(unit_mech, exp_jumps, lam) == pytest.approx(expected, rel=1e-9)


def test_transition_law_is_noncentral_gamma(unit_mech, no_jumps):
    growth = 1.0 - math.exp(-1.0)
    for lam in (0.5, 1.0, 2.0):
        expected = math.exp(-v_flow(unit_mech, 1.0, lam)) / (1.0 + lam * growth)
        assert transition_laplace(unit_mech, no_jumps, 1.0, 1.0, lam) == pytest.approx(expected, rel=1e-9)


def test_time_integral_routes_agree(unit_mech, exp_jumps):
    for t in (0.5, 1.0, math.inf):
        for lam in (0.2, 1.0, 3.0):
            assert psi_time_integral(unit_mech, exp_jumps, t, lam) == pytest.approx(
                psi_time_integral_direct(unit_mech, exp_jumps, t, lam), rel=1e-7
            )


def test_time_integral_for_negative_lambda(unit_mech, no_jumps):
    # beta = c: int_0^inf v_s(lam) ds = log(1 + lam) for lam > -1
    assert psi_time_integral(unit_mech, no_jumps, math.inf, -0.5) == pytest.approx(math.log(0.5), rel=1e-7)
    with pytest.raises(FlowDomainError):
        psi_time_integral(unit_mech, no_jumps, math.inf, -1.5)


def test_stationary_mean_and_ergodicity(unit_mech, exp_jumps):
    assert stationary_mean(unit_mech, exp_jumps) == pytest.approx(2.0)
    assert check_ergodicity(unit_mech, exp_jumps, 1.0) == pytest.approx(math.log(2.0) + 0.5, rel=1e-9)


def test_quadrature_failure_is_reported():
    with pytest.raises(QuadratureError):
        adaptive_quad(lambda u: 1.0 / u, 0.0, 1.0, "divergent")


def test_asymptotic_variance(unit_mech, no_jumps):
    assert asymptotic_variance_W(unit_mech, no_jumps, 0.0) == 0.0
    values = [asymptotic_variance_W(unit_mech, no_jumps, lam) for lam in (0.25, 0.5, 1.0)]
    assert all(math.isfinite(value) and value > 0 for value in values)
    assert values == sorted(values)


def test_variance_domain_with_heavy_jumps(unit_mech):
    imm = ImmigrationSpec(beta=1.0, density=AnalyticDensity(family="exponential", rate=0.3, scale=1.0))
    limit = admissible_lambda_max(unit_mech, imm, 5.0)
    assert 2.9 < limit < 3.0
    assert math.isfinite(asymptotic_variance_W(unit_mech, imm, 2.5))
    with pytest.raises(FlowDomainError):
        asymptotic_variance_W(unit_mech, imm, 3.5)


def test_admissible_range_is_untouched_without_jumps(unit_mech, no_jumps):
    assert admissible_lambda_max(unit_mech, no_jumps, 4.0) == 4.0


def test_immigration_rejects_infinite_mu_norm():
    with pytest.raises(ValueError):
        ImmigrationSpec(beta=1.0, density=AnalyticDensity(family="gamma", shape=-1.0))
