import math

import numpy as np
import pytest
from scipy import integrate

from com.mhire.app.services.density_space.density_schema import (
    ConstraintMode,
    ConstraintSet,
    GriddedDensity,
    LambdaGrid,
    dyadic_blocks,
    dyadic_breakpoints,
    trapezoid_grid,
)
from com.mhire.app.services.density_space.density_space import (
    assemble_operator,
    default_constraint_set,
    default_envelope,
    discretize_density,
    feature,
    lipschitz_check,
    membership_radius,
    model_g,
    mu_distance,
    mu_norm,
    read_density_csv,
    smallest_singular_value,
    write_density_csv,
)
from com.mhire.app.services.errors import GridMismatchError
from com.mhire.app.services.mechanism_core.mechanism import stationary_laplace, transition_laplace
from com.mhire.app.services.mechanism_core.mechanism_schema import AnalyticDensity


def test_dyadic_breakpoints(small_breakpoints):
    np.testing.assert_allclose(small_breakpoints, [0.25, 0.5, 1.0, 2.0, 4.0])
    grid = dyadic_breakpoints(-6, 6, 8)
    assert grid.size == 12 * 8 + 1
    assert grid[0] == 2.0 ** -6 and grid[-1] == 64.0
    with pytest.raises(GridMismatchError):
        dyadic_breakpoints(2, 2)


def test_dyadic_blocks():
    blocks = dyadic_blocks(dyadic_breakpoints(-1, 1, 2))
    assert [block.tolist() for block in blocks] == [[0, 1], [2, 3]]
    with pytest.raises(GridMismatchError):
        dyadic_blocks(np.array([0.5, 1.5, 2.0]))


def test_block_variation_ignores_jumps_between_blocks():
    cs = default_constraint_set(dyadic_breakpoints(-1, 1, 2), 4.0, ConstraintMode.BOUNDED_VARIATION)
    # step down at z = 1, the edge shared by the two blocks
    np.testing.assert_array_equal(cs.block_variation([2.0, 2.0, 0.5, 0.5]), [0.0, 0.0])
    np.testing.assert_allclose(cs.block_variation([2.0, 1.0, 0.5, 0.25]), [1.0, 0.25])


def test_gridded_density_validation(small_breakpoints):
    with pytest.raises(GridMismatchError):
        GriddedDensity(small_breakpoints, [1.0, 2.0])
    with pytest.raises(ValueError):
        GriddedDensity(small_breakpoints, [1.0, -1.0, 0.0, 0.0])
    with pytest.raises(GridMismatchError):
        GriddedDensity(np.array([1.0, 0.5]), [1.0])


def test_gridded_density_transforms():
    k = GriddedDensity(np.array([0.5, 1.0, 3.0]), [2.0, 0.5])
    assert k.mu_norm() == pytest.approx(2.0 * 0.375 + 0.5 * 2.0)
    assert k.mean() == pytest.approx(2.0 * 0.375 + 0.5 * 4.0)
    assert k.tail_rate(0.0) == pytest.approx(2.0)
    assert k.tail_rate(2.0) == pytest.approx(0.5)
    z = 1.7
    exact = sum(
        value * ((b - a) - (math.exp(-z * a) - math.exp(-z * b)) / z)
        for a, b, value in ((0.5, 1.0, 2.0), (1.0, 3.0, 0.5))
    )
    assert float(k.laplace_exponent(z)) == pytest.approx(exact, rel=1e-12)


def test_trapezoid_grid():
    lgrid = trapezoid_grid(2.0, 5)
    np.testing.assert_allclose(lgrid.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert lgrid.weights.sum() == pytest.approx(2.0)
    assert lgrid.norm_sq(np.ones(5)) == pytest.approx(2.0)
    with pytest.raises(GridMismatchError):
        LambdaGrid(np.array([0.0, 1.0]), np.array([1.0]))
    with pytest.raises(GridMismatchError):
        lgrid.norm_sq(np.ones(4))


def test_feature_small_z_limit(unit_mech):
    # Phi_inf(lambda, z) / z tends to (1/c) log(1 + c lambda / b)
    for lam in (0.5, 1.0, 2.0):
        assert feature(unit_mech, lam, 1e-6, math.inf) / 1e-6 == pytest.approx(math.log1p(lam), rel=1e-4)


def test_feature_bounds(unit_mech):
    for lam in (0.25, 1.0, 2.0):
        for z in (0.1, 1.0, 10.0):
            for horizon in (0.5, 2.0):
                assert 0.0 <= feature(unit_mech, lam, z, horizon) <= horizon
        for z in (1e-3, 1e-4):
            bound = z * math.log1p(lam)
            assert 0.95 * bound <= feature(unit_mech, lam, z, math.inf) <= bound * (1.0 + 1e-9)
    with pytest.raises(ValueError):
        feature(unit_mech, -0.1, 1.0, math.inf)


def test_mu_norm_of_step_densities():
    assert mu_norm(GriddedDensity(np.array([0.0, 1.0, 2.0]), [1.0, 1.0])) == pytest.approx(1.5)
    assert mu_norm(GriddedDensity(np.array([0.0, 0.5]), [2.0])) == pytest.approx(0.25)


@pytest.mark.parametrize("horizon", [1.0, math.inf])
def test_operator_entries_integrate_the_feature(unit_mech, horizon):
    breakpoints = np.array([0.5, 1.0, 2.0])
    lgrid = trapezoid_grid(2.0, 5)
    op = assemble_operator(unit_mech, 1.0, breakpoints, lgrid, horizon)
    assert op.shape == (5, 2)
    assert np.all(op.entries[0] == 0.0)
    for j, lam in enumerate(lgrid.nodes[1:], start=1):
        for i, (a, b) in enumerate(zip(breakpoints[:-1], breakpoints[1:])):
            reference, _ = integrate.quad(lambda z: feature(unit_mech, lam, z, horizon), a, b, epsabs=1e-13, epsrel=1e-10)
            assert op.entries[j, i] == pytest.approx(reference, rel=1e-6)


def test_zero_density_curve_is_the_pure_cir_law(unit_mech, no_jumps, small_breakpoints, small_lgrid):
    zero = GriddedDensity(small_breakpoints, np.zeros(4))
    stationary = assemble_operator(unit_mech, 1.0, small_breakpoints, small_lgrid, math.inf)
    one_step = assemble_operator(unit_mech, 1.0, small_breakpoints, small_lgrid, 1.0)
    expected_stationary = [math.log(stationary_laplace(unit_mech, no_jumps, lam)) for lam in small_lgrid.nodes]
    expected_one_step = [
        math.log(transition_laplace(unit_mech, no_jumps, 0.0, 1.0, lam)) if lam > 0 else 0.0
        for lam in small_lgrid.nodes
    ]
    np.testing.assert_allclose(model_g(stationary, zero), expected_stationary, atol=1e-8)
    np.testing.assert_allclose(model_g(one_step, zero), expected_one_step, atol=1e-8)


def test_model_curve_of_discretised_truth(unit_mech, exp_jumps):
    breakpoints = dyadic_breakpoints()
    lgrid = trapezoid_grid(2.0, 5)
    op = assemble_operator(unit_mech, 1.0, breakpoints, lgrid, math.inf)
    truth = discretize_density(exp_jumps.density, breakpoints)
    expected = [math.log(stationary_laplace(unit_mech, exp_jumps, lam)) for lam in lgrid.nodes]
    np.testing.assert_allclose(model_g(op, truth), expected, atol=2e-3)


def test_model_curve_is_affine(unit_mech, small_breakpoints, small_lgrid, rng):
    op = assemble_operator(unit_mech, 1.0, small_breakpoints, small_lgrid, math.inf)
    k1 = GriddedDensity(small_breakpoints, rng.random(4))
    k2 = GriddedDensity(small_breakpoints, rng.random(4))
    mixed = k1.with_values(0.25 * k1.values + 0.75 * k2.values)
    np.testing.assert_allclose(model_g(op, mixed), 0.25 * model_g(op, k1) + 0.75 * model_g(op, k2), atol=1e-13)


def test_model_curve_reverses_the_order_of_densities(unit_mech, small_breakpoints, small_lgrid, rng):
    for horizon in (1.0, math.inf):
        op = assemble_operator(unit_mech, 1.0, small_breakpoints, small_lgrid, horizon)
        for _ in range(5):
            lower = GriddedDensity(small_breakpoints, rng.random(4))
            higher = lower.with_values(lower.values + rng.random(4))
            assert np.all(model_g(op, lower) >= model_g(op, higher))


def test_model_curve_rejects_foreign_grid(unit_mech, small_breakpoints, small_lgrid):
    op = assemble_operator(unit_mech, 1.0, small_breakpoints, small_lgrid, math.inf)
    with pytest.raises(GridMismatchError):
        model_g(op, GriddedDensity(np.array([0.5, 1.0, 2.0]), [1.0, 1.0]))


def test_operator_rank(unit_mech, small_breakpoints, small_lgrid):
    op = assemble_operator(unit_mech, 1.0, small_breakpoints, small_lgrid, math.inf)
    assert op.sigma_min > 1e-12
    assert smallest_singular_value(np.ones((2, 3))) == 0.0


def test_lipschitz_check(unit_mech, small_breakpoints, small_lgrid):
    op = assemble_operator(unit_mech, 1.0, small_breakpoints, small_lgrid, math.inf)
    k1 = GriddedDensity(small_breakpoints, [1.0, 0.5, 0.2, 0.1])
    k2 = GriddedDensity(small_breakpoints, [0.5, 0.5, 0.2, 0.0])
    curve_gap, density_gap = lipschitz_check(op, k1, k2)
    assert density_gap == pytest.approx(mu_distance(k1, k2))
    assert 0.0 < curve_gap < math.inf


def test_discretize_density_gives_cell_averages(small_breakpoints):
    k = discretize_density(AnalyticDensity(family="exponential", rate=1.0, scale=1.0), small_breakpoints)
    left, right = small_breakpoints[:-1], small_breakpoints[1:]
    np.testing.assert_allclose(k.values, (np.exp(-left) - np.exp(-right)) / (right - left), rtol=1e-12)


def test_default_envelope_and_constraint_set(small_breakpoints):
    envelope = default_envelope(small_breakpoints, 8.0)
    np.testing.assert_allclose(envelope.values, [1.0, 1.0, 1.0, 0.25])
    cs = default_constraint_set(small_breakpoints, 8.0, "bounded-variation")
    assert cs.mode is ConstraintMode.BOUNDED_VARIATION
    with pytest.raises(ValueError):
        ConstraintSet(envelope=envelope, R=0.5)


def test_membership_radius():
    breakpoints = dyadic_breakpoints(-1, 1, 2)
    increasing = GriddedDensity(breakpoints, [0.1, 0.2, 0.3, 0.4])
    assert membership_radius(increasing, ConstraintMode.MONOTONE) == math.inf
    assert membership_radius(increasing, ConstraintMode.BOUNDED_VARIATION) == pytest.approx(0.1)
    decreasing = GriddedDensity(breakpoints, [1.0, 0.5, 0.5, 0.1])
    assert membership_radius(decreasing, ConstraintMode.MONOTONE) == pytest.approx(0.5)


def test_density_csv(tmp_path, small_breakpoints):
    k = GriddedDensity(small_breakpoints, [1.0, 0.5, 1.0 / 3.0, 0.0])
    path = write_density_csv(k, tmp_path / "k.csv")
    assert path.read_text().splitlines()[0] == "z_left,z_right,value"
    restored = read_density_csv(path)
    assert restored.same_grid(k.breakpoints)
    np.testing.assert_array_equal(restored.values, k.values)

    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n0,1,1\n")
    with pytest.raises(GridMismatchError):
        read_density_csv(bad)
