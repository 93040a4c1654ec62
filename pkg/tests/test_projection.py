import numpy as np
import pytest

from com.mhire.app.services.density_space.density_schema import (
    ConstraintMode,
    ConstraintSet,
    GriddedDensity,
    dyadic_breakpoints,
)
from com.mhire.app.services.density_space.density_space import default_constraint_set
from com.mhire.app.services.density_space.projection import (
    linear_constraints,
    project,
    project_values,
    total_variation,
    tv_ball_projection,
    tv_prox,
)
from com.mhire.app.services.errors import GridMismatchError


def _random_feasible(cs: ConstraintSet, rng: np.random.Generator) -> np.ndarray:
    return cs.upper * np.sort(rng.random(cs.upper.size))[::-1]


def test_total_variation():
    assert total_variation(np.array([1.0, 3.0, 2.0])) == pytest.approx(3.0)
    assert total_variation(np.array([5.0])) == 0.0


def test_tv_prox_limits(rng):
    y = rng.normal(size=6)
    np.testing.assert_array_equal(tv_prox(y, 0.0), y)
    flattened = tv_prox(y, 100.0)
    np.testing.assert_allclose(flattened, np.full(6, y.mean()), atol=1e-9)


def test_tv_ball_projection(rng):
    y = np.array([0.0, 3.0, -1.0, 2.0, 2.0])
    projected = tv_ball_projection(y, 2.0)
    assert total_variation(projected) == pytest.approx(2.0, abs=1e-8)
    assert projected.mean() == pytest.approx(y.mean())
    inside = np.array([1.0, 1.5, 1.0])
    np.testing.assert_array_equal(tv_ball_projection(inside, 5.0), inside)
    np.testing.assert_allclose(tv_ball_projection(y, 0.0), np.full(5, y.mean()))


@pytest.mark.parametrize("mode", list(ConstraintMode))
def test_projection_is_feasible_and_idempotent(mode, rng):
    cs = default_constraint_set(dyadic_breakpoints(-2, 2, 2), 2.0, mode)
    for _ in range(5):
        y = rng.normal(scale=0.5, size=cs.upper.size)
        x = project_values(y, cs)
        assert cs.contains(x, tol=1e-8)
        np.testing.assert_allclose(project_values(x, cs), x, atol=1e-8)


@pytest.mark.parametrize("mode", list(ConstraintMode))
def test_projection_variational_inequality(mode, rng):
    # p = P(y) iff <y - p, c - p> <= 0 for every feasible c
    cs = default_constraint_set(dyadic_breakpoints(-2, 2, 2), 2.0, mode)
    for _ in range(5):
        y = rng.normal(scale=0.5, size=cs.upper.size)
        p = project_values(y, cs)
        for _ in range(20):
            c = _random_feasible(cs, rng)
            assert np.dot(y - p, c - p) <= 1e-7


@pytest.mark.parametrize("mode", list(ConstraintMode))
def test_projection_is_the_nearest_feasible_point(mode, rng):
    cs = default_constraint_set(dyadic_breakpoints(-2, 2, 2), 2.0, mode)
    y = rng.normal(scale=0.5, size=cs.upper.size)
    distance = np.linalg.norm(y - project_values(y, cs))
    for _ in range(100):
        assert distance <= np.linalg.norm(y - _random_feasible(cs, rng)) + 1e-7


@pytest.mark.parametrize("mode", list(ConstraintMode))
def test_projection_is_nonexpansive(mode, rng):
    cs = default_constraint_set(dyadic_breakpoints(-2, 2, 2), 2.0, mode)
    for _ in range(20):
        x, y = rng.normal(scale=0.5, size=(2, cs.upper.size))
        gap = np.linalg.norm(project_values(x, cs) - project_values(y, cs))
        assert gap <= np.linalg.norm(x - y) + 1e-7


def test_feasible_point_is_returned_unchanged(small_cs):
    x = small_cs.upper * 0.5
    np.testing.assert_array_equal(project_values(x, small_cs), x)


def test_project_checks_the_grid(small_cs):
    with pytest.raises(GridMismatchError):
        project(GriddedDensity(np.array([0.5, 1.0]), [1.0]), small_cs)
    with pytest.raises(GridMismatchError):
        project_values(np.zeros(3), small_cs)
    density = project(np.full(4, 10.0), small_cs)
    np.testing.assert_allclose(density.values, small_cs.upper)


@pytest.mark.parametrize("mode", list(ConstraintMode))
def test_linear_constraints_describe_the_set(mode, rng):
    cs = default_constraint_set(dyadic_breakpoints(-2, 2, 2), 2.0, mode)
    G, h = linear_constraints(cs)
    for _ in range(10):
        x = _random_feasible(cs, rng)
        assert np.all(G @ x <= h + 1e-12)
    increasing = np.linspace(0.0, 0.1, cs.upper.size)
    if mode is ConstraintMode.MONOTONE:
        assert np.any(G @ increasing > h)
    above_envelope = cs.upper + 0.1
    assert np.any(G @ above_envelope > h)


def test_linear_constraints_bound_block_variation():
    cs = ConstraintSet(
        envelope=GriddedDensity(dyadic_breakpoints(-1, 0, 4), np.full(4, 1.0)),
        R=0.5,
        mode=ConstraintMode.BOUNDED_VARIATION,
    )
    G, h = linear_constraints(cs)
    zigzag = np.array([0.5, 0.9, 0.5, 0.9])
    assert cs.violation(zigzag) > 0
    assert np.any(G @ zigzag > h)
    assert G.shape[0] == 2 * 4 + 2 ** 3
