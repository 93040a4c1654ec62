import numpy as np
import pytest

from com.mhire.app.config.config import Config
from com.mhire.app.services.density_space.density_schema import dyadic_breakpoints, trapezoid_grid
from com.mhire.app.services.density_space.density_space import default_constraint_set
from com.mhire.app.services.mechanism_core.mechanism_schema import (
    AnalyticDensity,
    BranchingMechanism,
    ImmigrationSpec,
)


@pytest.fixture(autouse=True)
def fresh_config():
    Config.reload()
    yield
    Config.reload()


@pytest.fixture
def unit_mech():
    return BranchingMechanism(b=1.0, c=1.0)


@pytest.fixture
def no_jumps():
    return ImmigrationSpec(beta=1.0)


@pytest.fixture
def exp_jumps():
    return ImmigrationSpec(beta=1.0, density=AnalyticDensity(family="exponential", rate=1.0, scale=1.0))


@pytest.fixture
def small_breakpoints():
    # cells (0.25, 0.5], (0.5, 1], (1, 2], (2, 4]
    return dyadic_breakpoints(-2, 2, 1)


@pytest.fixture
def small_lgrid():
    return trapezoid_grid(2.0, 16)


@pytest.fixture
def small_cs(small_breakpoints):
    return default_constraint_set(small_breakpoints, 4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_EXPERIMENT_TOML = """
[mechanism]
b = 1.0
c = 1.0

[immigration]
beta = 1.0
family = "exponential"
rate = 1.0
scale = 1.0

[simulation]
n = 200
seed = 7

[grids]
lambda_max = 2.0
n_lambda = 12
z_min_exp = -2
z_max_exp = 2
cells_per_block = 1
R = 8.0

[estimator]
routes = ["g1", "g2"]
"""


@pytest.fixture
def experiment_file(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(SMALL_EXPERIMENT_TOML)
    return path
