import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from com.mhire.app.services.density_space.density_schema import (
    ConstraintMode,
    ConstraintSet,
    LambdaGrid,
    dyadic_breakpoints,
    trapezoid_grid,
)
from com.mhire.app.services.density_space.density_space import (
    default_constraint_set,
    discretize_density,
    read_density_csv,
)
from com.mhire.app.services.errors import ConfigError, GridMismatchError
from com.mhire.app.services.estimator.estimator_schema import FitOptions
from com.mhire.app.services.mechanism_core.mechanism_schema import (
    AnalyticDensity,
    BranchingMechanism,
    ImmigrationSpec,
)
from com.mhire.app.services.simulator.simulator_schema import Scheme, SimConfig

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MechanismSection(_Section):
    b: float = Field(default=1.0, gt=0)
    c: float = Field(default=1.0, ge=0)


class ImmigrationSection(_Section):
    beta: float = Field(default=1.0, ge=0)
    family: Literal["zero", "exponential", "gamma", "gridded"] = "exponential"
    rate: float = Field(default=1.0, gt=0)
    scale: float = Field(default=1.0, ge=0)
    shape: float = Field(default=1.0, gt=-1)
    path: Optional[str] = Field(default=None, description="CSV with z_left,z_right,value (gridded family)")

    @model_validator(mode="after")
    def _gridded_needs_path(self):
        if self.family == "gridded" and not self.path:
            raise ValueError("The gridded family needs a CSV path")
        return self


class SimulationSection(_Section):
    scheme: Scheme = "exact-cir-jumps"
    n: int = Field(default=1000, ge=1)
    substeps: int = Field(default=50, ge=1)
    small_jump_cutoff: Optional[float] = Field(default=None, ge=0)
    burn_in: Optional[int] = Field(default=None, ge=0)
    seed: int = Field(default=20240101, ge=0, lt=2 ** 64)
    x0: float = Field(default=0.0, ge=0)
    delta: float = Field(default=1.0, gt=0)


class GridsSection(_Section):
    lambda_max: float = Field(default=2.0, gt=0)
    n_lambda: int = Field(default=64, ge=2)
    lambda_nodes: Optional[List[float]] = None
    lambda_weights: Optional[List[float]] = None
    z_min_exp: int = -6
    z_max_exp: int = 6
    cells_per_block: int = Field(default=8, ge=1)
    R: float = Field(default=256.0, gt=0)
    mode: ConstraintMode = ConstraintMode.MONOTONE


class EstimatorSection(_Section):
    routes: List[Literal["g1", "g2"]] = Field(default_factory=lambda: ["g1", "g2"], min_length=1)
    tol: Optional[float] = Field(default=None, gt=0)
    max_iter: Optional[int] = Field(default=None, ge=1)
    polish: bool = True


class BenchmarkSection(_Section):
    ladder: List[int] = Field(default_factory=lambda: [500, 2000, 8000], min_length=1)
    replicates: int = Field(default=20, ge=1)
    se_multiple: Optional[float] = Field(default=None, gt=0)
    consistency_ratio: float = Field(default=0.5, gt=0, description="Largest-n over smallest-n median bound")
    risk_factor: float = Field(default=3.0, ge=1, description="Allowed ratio between scaled risk medians")
    # z-grid of the benchmark fits; its operator must be injective on the lambda
    # grid, which rules out the [grids] default of 96 cells on 64 nodes
    z_min_exp: int = -1
    z_max_exp: int = 1
    cells_per_block: int = Field(default=1, ge=1)
    truth_on_grid: bool = Field(default=True, description="Simulate from the cell-averaged truth")

    @field_validator("ladder")
    @classmethod
    def _strictly_increasing(cls, ladder: List[int]) -> List[int]:
        if any(n < 1 for n in ladder) or any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("ladder must be strictly increasing positive sample sizes")
        return ladder

    @model_validator(mode="after")
    def _grid_is_ordered(self):
        if self.z_max_exp <= self.z_min_exp:
            raise ValueError("z_max_exp must exceed z_min_exp")
        return self


class ExperimentConfig(_Section):
    """One experiment: truth, simulation, grids, estimator and benchmark settings."""

    mechanism: MechanismSection = Field(default_factory=MechanismSection)
    immigration: ImmigrationSection = Field(default_factory=ImmigrationSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    grids: GridsSection = Field(default_factory=GridsSection)
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    benchmark: BenchmarkSection = Field(default_factory=BenchmarkSection)
    output_dir: Optional[str] = None
    base_dir: str = Field(default=".", exclude=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def mechanism_spec(self) -> BranchingMechanism:
        return BranchingMechanism(b=self.mechanism.b, c=self.mechanism.c)

    def immigration_spec(self) -> ImmigrationSpec:
        section = self.immigration
        if section.family == "gridded":
            path = Path(section.path)
            if not path.is_absolute():
                path = Path(self.base_dir) / path
            density = read_density_csv(path)
        elif section.family == "exponential":
            density = AnalyticDensity(family="exponential", rate=section.rate, scale=section.scale)
        else:
            density = AnalyticDensity(family=section.family, rate=section.rate,
                                      scale=section.scale, shape=section.shape)
        return ImmigrationSpec(beta=section.beta, density=density)

    def sim_config(self) -> SimConfig:
        section = self.simulation
        return SimConfig(
            mech=self.mechanism_spec(),
            imm=self.immigration_spec(),
            scheme=section.scheme,
            substeps=section.substeps,
            small_jump_cutoff=section.small_jump_cutoff,
            burn_in=section.burn_in,
            seed=section.seed,
            x0=section.x0,
            delta=section.delta,
        )

    def breakpoints(self) -> np.ndarray:
        grids = self.grids
        return dyadic_breakpoints(grids.z_min_exp, grids.z_max_exp, grids.cells_per_block)

    def lambda_grid(self) -> LambdaGrid:
        grids = self.grids
        if grids.lambda_nodes is None:
            lgrid = trapezoid_grid(grids.lambda_max, grids.n_lambda)
            if grids.lambda_weights is not None:
                lgrid = lgrid.with_weights(grids.lambda_weights)
            return lgrid
        if grids.lambda_weights is None:
            raise GridMismatchError("Explicit lambda_nodes need matching lambda_weights")
        if len(grids.lambda_weights) != len(grids.lambda_nodes):
            raise GridMismatchError(
                f"{len(grids.lambda_weights)} lambda weights for {len(grids.lambda_nodes)} lambda nodes"
            )
        return LambdaGrid(np.array(grids.lambda_nodes), np.array(grids.lambda_weights))

    def constraint_set(self) -> ConstraintSet:
        return default_constraint_set(self.breakpoints(), self.grids.R, self.grids.mode)

    def benchmark_breakpoints(self) -> np.ndarray:
        section = self.benchmark
        return dyadic_breakpoints(section.z_min_exp, section.z_max_exp, section.cells_per_block)

    def benchmark_constraint_set(self) -> ConstraintSet:
        return default_constraint_set(self.benchmark_breakpoints(), self.grids.R, self.grids.mode)

    def benchmark_truth(self) -> ImmigrationSpec:
        """Immigration law the benchmark simulates from."""
        imm = self.immigration_spec()
        if not self.benchmark.truth_on_grid:
            return imm
        density = discretize_density(imm.density, self.benchmark_breakpoints())
        return ImmigrationSpec(beta=imm.beta, density=density)

    def fit_options(self) -> FitOptions:
        section = self.estimator
        return FitOptions(tol=section.tol, max_iter=section.max_iter, polish=section.polish)


def load_experiment_config(path: Union[str, Path, None]) -> ExperimentConfig:
    """Parse a TOML experiment file; ``None`` gives the built-in defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
        config = ExperimentConfig(**raw, base_dir=str(path.parent))
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})")
    except ValidationError as e:
        raise ConfigError(f"{path}: {e.error_count()} invalid setting(s)\n{e}")
    logger.info(f"Loaded experiment config {path} (hash {config.config_hash()[:12]})")
    return config
