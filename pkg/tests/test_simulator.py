import logging
import math

import numpy as np
import pytest

from com.mhire.app.services.density_space.density_schema import GriddedDensity
from com.mhire.app.services.errors import SimulationConfigError
from com.mhire.app.services.mechanism_core.mechanism import stationary_mean, transition_laplace
from com.mhire.app.services.mechanism_core.mechanism_schema import (
    AnalyticDensity,
    BranchingMechanism,
    ImmigrationSpec,
)
from com.mhire.app.services.simulator.simulator import (
    build_jump_law,
    cir_transition,
    make_rng,
    one_step_samples,
    simulate_path,
)
from com.mhire.app.services.simulator.simulator_schema import DEFAULT_INFINITE_ACTIVITY_CUTOFF, SimConfig


def test_rng_streams_are_reproducible_and_independent():
    first = make_rng(42, 3, 1).random(5)
    np.testing.assert_array_equal(first, make_rng(42, 3, 1).random(5))
    assert not np.array_equal(first, make_rng(42, 3, 2).random(5))
    assert not np.array_equal(first, make_rng(43, 3, 1).random(5))


def test_cir_transition_without_diffusion_is_deterministic():
    mech = BranchingMechanism(b=2.0, c=0.0)
    x = np.array([0.0, 1.0, 3.0])
    result = cir_transition(mech, 0.5, x, 0.7, make_rng(0))
    expected = x * math.exp(-1.4) + 0.25 * (1.0 - math.exp(-1.4))
    np.testing.assert_allclose(result, expected, rtol=1e-14)


def test_cir_transition_zero_step_is_identity(unit_mech):
    x = np.array([0.3, 1.2])
    np.testing.assert_array_equal(cir_transition(unit_mech, 1.0, x, 0.0, make_rng(0)), x)


def test_cir_transition_moments(unit_mech):
    count = 40_000
    draws = cir_transition(unit_mech, 1.0, np.full(count, 2.0), 0.5, make_rng(5))
    mean = 2.0 * math.exp(-0.5) + (1.0 - math.exp(-0.5))
    se = draws.std(ddof=1) / math.sqrt(count)
    assert abs(draws.mean() - mean) < 4 * se
    assert np.all(draws >= 0)


def test_zero_immigration_absorbs_at_zero(unit_mech):
    draws = cir_transition(unit_mech, 0.0, np.zeros(100), 1.0, make_rng(1))
    np.testing.assert_array_equal(draws, 0.0)


def test_jump_laws():
    assert build_jump_law(AnalyticDensity(), 0.0).rate == 0.0

    exponential = build_jump_law(AnalyticDensity(family="exponential", rate=2.0, scale=3.0), 0.5)
    assert exponential.rate == pytest.approx(1.5 * math.exp(-1.0))
    sizes = exponential.sample(make_rng(2), 50_000)
    assert sizes.min() >= 0.5
    assert sizes.mean() == pytest.approx(1.0, abs=0.02)

    gamma = build_jump_law(AnalyticDensity(family="gamma", shape=2.0, rate=1.0, scale=1.0), 0.0)
    assert gamma.rate == pytest.approx(1.0)
    assert gamma.sample(make_rng(3), 50_000).mean() == pytest.approx(2.0, abs=0.05)


def test_infinite_activity_needs_a_cutoff():
    density = AnalyticDensity(family="gamma", shape=-0.5, rate=1.0, scale=1.0)
    with pytest.raises(SimulationConfigError):
        build_jump_law(density, 0.0)
    law = build_jump_law(density, 0.01)
    sizes = law.sample(make_rng(4), 10_000)
    assert np.all(np.isfinite(sizes))
    assert sizes.min() >= 0.01 * (1 - 1e-9)


def test_gridded_jump_law():
    density = GriddedDensity(np.array([0.5, 1.0, 2.0]), [1.0, 0.25])
    law = build_jump_law(density, 0.0)
    assert law.rate == pytest.approx(0.75)
    sizes = law.sample(make_rng(6), 40_000)
    assert sizes.min() >= 0.5 and sizes.max() <= 2.0
    assert np.mean(sizes > 1.0) == pytest.approx(1.0 / 3.0, abs=0.02)


def test_sim_config_defaults(unit_mech, no_jumps):
    cfg = SimConfig(mech=BranchingMechanism(b=0.3, c=1.0), imm=no_jumps)
    assert cfg.effective_burn_in == 67
    assert cfg.effective_cutoff == 0.0
    infinite = ImmigrationSpec(beta=1.0, density=AnalyticDensity(family="gamma", shape=0.0))
    assert SimConfig(mech=unit_mech, imm=infinite).effective_cutoff == DEFAULT_INFINITE_ACTIVITY_CUTOFF


def test_simulate_path_is_reproducible(unit_mech, exp_jumps):
    cfg = SimConfig(mech=unit_mech, imm=exp_jumps, seed=9)
    first = simulate_path(cfg, 50)
    assert first.series.values.shape == (51,)
    assert first.scheme_used == "exact-cir-jumps"
    np.testing.assert_array_equal(first.series.values, simulate_path(cfg, 50).series.values)
    other = simulate_path(cfg, 50, substream=(1,))
    assert not np.array_equal(first.series.values, other.series.values)
    assert first.series.meta["seed"] == 9


def test_simulate_path_without_immigration_stays_at_zero(unit_mech):
    cfg = SimConfig(mech=unit_mech, imm=ImmigrationSpec(beta=0.0), seed=1, x0=0.0)
    np.testing.assert_array_equal(simulate_path(cfg, 20).series.values, 0.0)


def test_simulate_path_rejects_empty_request(unit_mech, no_jumps):
    with pytest.raises(SimulationConfigError):
        simulate_path(SimConfig(mech=unit_mech, imm=no_jumps), 0)


def test_long_path_matches_the_stationary_mean(unit_mech, exp_jumps):
    cfg = SimConfig(mech=unit_mech, imm=exp_jumps, seed=3)
    values = simulate_path(cfg, 20_000).series.values
    assert values.mean() == pytest.approx(stationary_mean(unit_mech, exp_jumps), rel=0.05)


def test_euler_warns_with_few_substeps(unit_mech, no_jumps, caplog):
    cfg = SimConfig(mech=unit_mech, imm=no_jumps, scheme="euler", substeps=5)
    with caplog.at_level(logging.WARNING):
        simulate_path(cfg, 3)
    assert any("substeps" in record.message for record in caplog.records)


def test_one_step_samples_match_the_transition_law(unit_mech, exp_jumps):
    cfg = SimConfig(mech=unit_mech, imm=exp_jumps, seed=21)
    draws = one_step_samples(cfg, 1.0, 40_000)
    assert draws.shape == (40_000,)
    for lam in (0.5, 2.0):
        sample = np.exp(-lam * draws)
        se = sample.std(ddof=1) / math.sqrt(draws.size)
        assert abs(sample.mean() - transition_laplace(unit_mech, exp_jumps, 1.0, 1.0, lam)) < 4 * se


def test_euler_one_step_is_close_to_exact(unit_mech, exp_jumps):
    cfg = SimConfig(mech=unit_mech, imm=exp_jumps, seed=22, scheme="euler", substeps=100)
    draws = one_step_samples(cfg, 1.0, 20_000)
    target = transition_laplace(unit_mech, exp_jumps, 1.0, 1.0, 0.5)
    assert np.exp(-0.5 * draws).mean() == pytest.approx(target, abs=0.02)


def test_one_step_samples_edge_cases(unit_mech, no_jumps):
    cfg = SimConfig(mech=unit_mech, imm=no_jumps)
    assert one_step_samples(cfg, 1.0, 0).size == 0
    with pytest.raises(ValueError):
        one_step_samples(cfg, -1.0, 10)
