import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from com.mhire.app.services.density_space.density_schema import ConstraintMode, GriddedDensity


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    """Samples X_0, ..., X_n of one path at spacing delta."""

    values: np.ndarray
    delta: float = 1.0
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise ValueError("A series needs X_0 and at least one further observation")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("Observations must be finite and nonnegative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.size - 1

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    @staticmethod
    def meta_path(path: Union[str, Path]) -> Path:
        path = Path(path)
        return path.with_name(f"{path.stem}.meta.json")

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        times = self.delta * np.arange(self.values.size)
        np.savetxt(path, np.column_stack([times, self.values]), delimiter=",",
                   header="t,value", comments="", fmt="%.17g")
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "ObservationSeries":
        """Reads one value per line or `t,value` rows; a header line is optional."""
        path = Path(path)
        rows = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        if rows and not _is_number(rows[0].split(",")[-1]):
            rows = rows[1:]
        fields = [row.split(",") for row in rows]
        try:
            values = [float(parts[-1]) for parts in fields]
            times = [float(parts[0]) for parts in fields if len(parts) > 1]
        except ValueError as e:
            raise ValueError(f"{path}: unparseable observation ({e})")
        delta = 1.0
        if len(times) == len(values) and len(times) > 1:
            delta = times[1] - times[0]
        meta = {}
        meta_file = cls.meta_path(path)
        if meta_file.exists():
            meta = json.loads(meta_file.read_text())
        return cls(np.array(values), delta=float(meta.get("delta", delta)), meta=meta)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


@dataclass(frozen=True, eq=False)
class EmpiricalTransforms:
    g1n: np.ndarray
    g2n: np.ndarray
    n: int


class FitOptions(BaseModel):
    tol: Optional[float] = Field(default=None, gt=0, description="Fixed-point residual tolerance")
    max_iter: Optional[int] = Field(default=None, ge=1)
    polish: bool = True
    polish_every: int = Field(default=200, ge=1)
    check_every: int = Field(default=25, ge=1, description="Iterations between residual checks")


class EstimateReport(BaseModel):
    route: Literal["g1", "g2"]
    grid: List[float]
    density_values: List[float]
    lambda_nodes: List[float]
    g_hat: List[float]
    objective: float
    iterations: int
    kkt_residual: float
    flags: List[str] = Field(default_factory=list)
    membership_radius: float
    sigma_min: float
    norms: Dict[str, float] = Field(default_factory=dict)
    config_hash: Optional[str] = None

    @property
    def density(self) -> GriddedDensity:
        return GriddedDensity(np.array(self.grid), np.array(self.density_values))

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2)


# Request / response models for the estimator router

class EstimateRequest(BaseModel):
    values: List[float] = Field(min_length=2, description="Observations X_0..X_n")
    delta: float = Field(default=1.0, gt=0)
    b: float = Field(gt=0)
    c: float = Field(ge=0)
    beta: float = Field(ge=0)
    routes: List[Literal["g1", "g2"]] = Field(default_factory=lambda: ["g1", "g2"], min_length=1)
    lambda_max: float = Field(default=2.0, gt=0)
    n_lambda: int = Field(default=64, ge=2)
    z_min_exp: int = -6
    z_max_exp: int = 6
    cells_per_block: int = Field(default=8, ge=1)
    R: float = Field(default=256.0, gt=0)
    mode: ConstraintMode = ConstraintMode.MONOTONE


class EstimateResponse(BaseModel):
    status: str
    message: str
    reports: Dict[str, EstimateReport]
