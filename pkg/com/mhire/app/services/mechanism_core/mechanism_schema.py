import math
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate, special

from com.mhire.app.services.density_space.density_schema import GriddedDensity


class BranchingMechanism(BaseModel):
    """phi(z) = b z + c z^2 with b > 0 (subcritical) and c >= 0."""
    model_config = ConfigDict(frozen=True)

    b: float = Field(gt=0, description="Reversion rate (1/time)")
    c: float = Field(ge=0, description="Diffusion coefficient (state/time)")


class AnalyticDensity(BaseModel):
    """Closed-form jump densities.

    zero:        k(u) = 0
    exponential: k(u) = scale * exp(-rate u)
    gamma:       k(u) = scale * u^(shape - 1) * exp(-rate u), shape > -1
    """
    model_config = ConfigDict(frozen=True)

    family: Literal["zero", "exponential", "gamma"] = "zero"
    rate: float = Field(default=1.0, gt=0)
    scale: float = Field(default=1.0, ge=0)
    shape: float = Field(default=1.0, gt=-1)

    @model_validator(mode="after")
    def _exponential_is_gamma_one(self):
        if self.family == "exponential" and self.shape != 1.0:
            raise ValueError("The exponential family has shape 1")
        return self

    @property
    def effective_shape(self) -> float:
        return 1.0 if self.family == "exponential" else self.shape

    @property
    def is_zero(self) -> bool:
        return self.family == "zero" or self.scale == 0.0

    @property
    def domain_lower(self) -> float:
        """Infimum of z for which the Laplace exponent is finite."""
        return -np.inf if self.is_zero else -self.rate

    @property
    def is_finite_activity(self) -> bool:
        return self.is_zero or self.effective_shape > 0

    def pdf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.is_zero:
            return np.zeros_like(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = self.scale * np.power(u, self.effective_shape - 1.0) * np.exp(-self.rate * u)
        return np.where(u > 0, value, 0.0)

    def laplace_exponent(self, z) -> np.ndarray:
        """int_0^inf (1 - e^{-z u}) k(u) du, finite for z > -rate."""
        z = np.asarray(z, dtype=float)
        if self.is_zero:
            return np.zeros_like(z)
        a, theta, s = self.effective_shape, self.rate, self.scale
        if a == 1.0:
            return s * z / (theta * (theta + z))
        if a == 0.0:
            return s * np.log1p(z / theta)
        return s * special.gamma(a) * (theta ** (-a) - np.power(theta + z, -a))

    def mean(self) -> float:
        if self.is_zero:
            return 0.0
        a = self.effective_shape
        return float(self.scale * special.gamma(a + 1.0) / self.rate ** (a + 1.0))

    def mu_norm(self) -> float:
        if self.is_zero:
            return 0.0
        inner, _ = integrate.quad(lambda u: u * float(self.pdf(u)), 0.0, 1.0)
        outer, _ = integrate.quad(lambda u: float(self.pdf(u)), 1.0, np.inf)
        return inner + outer

    def tail_rate(self, eps: float = 0.0) -> float:
        """int_eps^inf k(u) du; infinite for infinite-activity families at eps = 0."""
        if self.is_zero:
            return 0.0
        a, theta, s = self.effective_shape, self.rate, self.scale
        x = theta * eps
        if a > 0:
            return float(s * theta ** (-a) * special.gamma(a) * special.gammaincc(a, x))
        if eps <= 0:
            return math.inf
        if a == 0.0:
            return float(s * special.exp1(x))
        # Gamma(a, x) = (Gamma(a + 1, x) - x^a e^{-x}) / a for -1 < a < 0
        upper = (special.gamma(a + 1.0) * special.gammaincc(a + 1.0, x) - x ** a * math.exp(-x)) / a
        return float(s * theta ** (-a) * upper)

    def cell_masses(self, breakpoints) -> np.ndarray:
        """int k(u) du over each cell of the given breakpoints."""
        z = np.asarray(breakpoints, dtype=float)
        if self.is_zero:
            return np.zeros(z.size - 1)
        a, theta, s = self.effective_shape, self.rate, self.scale
        if a > 0:
            cdf = special.gammainc(a, theta * z)
            return s * theta ** (-a) * special.gamma(a) * np.diff(cdf)
        return np.array([
            integrate.quad(lambda u: float(self.pdf(u)), lo, hi)[0] for lo, hi in zip(z[:-1], z[1:])
        ])


JumpDensity = Union[AnalyticDensity, GriddedDensity]


class ImmigrationSpec(BaseModel):
    """psi(z) = beta z + int (1 - e^{-z u}) k(u) du."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    beta: float = Field(ge=0, description="Linear immigration rate (state/time)")
    density: JumpDensity = Field(default_factory=AnalyticDensity)

    @model_validator(mode="after")
    def _finite_mu_norm(self):
        if not np.isfinite(self.density.mu_norm()):
            raise ValueError("Jump density must have a finite mu-norm")
        return self


# Request / response models for the mechanism router

class MechanismRequest(BaseModel):
    b: float = Field(gt=0)
    c: float = Field(ge=0)
    beta: float = Field(ge=0)
    density: AnalyticDensity = Field(default_factory=AnalyticDensity)
    lambdas: List[float] = Field(min_length=1)
    x: float = Field(default=1.0, ge=0)
    t: float = Field(default=1.0, gt=0)
    include_variance: bool = False


class LaplacePoint(BaseModel):
    lam: float
    v_t: float
    phi: float
    psi: Optional[float] = None
    transition_laplace: Optional[float] = None
    stationary_laplace: Optional[float] = None
    asymptotic_variance: Optional[float] = None


class MechanismResponse(BaseModel):
    status: str
    message: str
    stationary_mean: float
    ergodicity_integral: Optional[float] = None
    admissible_lambda_max: Optional[float] = None
    points: List[LaplacePoint]
