import math
from dataclasses import dataclass
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from com.mhire.app.services.estimator.estimator_schema import ObservationSeries
from com.mhire.app.services.mechanism_core.mechanism_schema import (
    AnalyticDensity,
    BranchingMechanism,
    ImmigrationSpec,
)

Scheme = Literal["exact-cir-jumps", "euler"]

EULER_SUBSTEP_FLOOR = 20
DEFAULT_INFINITE_ACTIVITY_CUTOFF = 1e-4


class SimConfig(BaseModel):
    """Simulation settings for dX = (beta - b X) dt + sqrt(2 c X) dB + jumps."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    mech: BranchingMechanism
    imm: ImmigrationSpec
    scheme: Scheme = "exact-cir-jumps"
    substeps: int = Field(default=50, ge=1, description="Euler substeps per observation interval")
    small_jump_cutoff: Optional[float] = Field(default=None, ge=0)
    burn_in: Optional[int] = Field(default=None, ge=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    x0: float = Field(default=0.0, ge=0)
    delta: float = Field(default=1.0, gt=0)

    @property
    def effective_cutoff(self) -> float:
        if self.small_jump_cutoff is not None:
            return self.small_jump_cutoff
        return 0.0 if self.imm.density.is_finite_activity else DEFAULT_INFINITE_ACTIVITY_CUTOFF

    @property
    def effective_burn_in(self) -> int:
        if self.burn_in is not None:
            return self.burn_in
        return math.ceil(20.0 / self.mech.b)


@dataclass(frozen=True)
class PathSample:
    series: ObservationSeries
    jumps_emitted: int
    scheme_used: str


# Request / response models for the simulator router

class SimulationRequest(BaseModel):
    b: float = Field(gt=0)
    c: float = Field(ge=0)
    beta: float = Field(ge=0)
    density: AnalyticDensity = Field(default_factory=AnalyticDensity)
    scheme: Scheme = "exact-cir-jumps"
    substeps: int = Field(default=50, ge=1)
    small_jump_cutoff: Optional[float] = Field(default=None, ge=0)
    burn_in: Optional[int] = Field(default=None, ge=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    x0: float = Field(default=0.0, ge=0)
    delta: float = Field(default=1.0, gt=0)
    n: int = Field(ge=1, le=1_000_000, description="Number of observation intervals")


class SimulationResponse(BaseModel):
    status: str
    message: str
    values: List[float]
    delta: float
    jumps_emitted: int
    scheme_used: str
    seed: int
