from datetime import datetime
from typing import Optional

from fastapi import HTTPException
from pydantic import BaseModel


class ErrorResponse(BaseModel):
    """Standard error response model"""
    status_code: int
    detail: str
    error_type: Optional[str] = None  # For categorizing errors
    timestamp: Optional[str] = None    # For error tracking


class CBIError(Exception):
    """Base class for estimation, simulation and harness failures."""

    status_code = 500
    exit_code = 1

    @property
    def error_type(self) -> str:
        return type(self).__name__

    def to_response(self) -> ErrorResponse:
        return ErrorResponse(
            status_code=self.status_code,
            detail=str(self),
            error_type=self.error_type,
            timestamp=datetime.now().isoformat(),
        )


class FlowDomainError(CBIError):
    """Argument lies outside the domain where v_t(lambda) or psi is finite."""
    status_code = 422


class QuadratureError(CBIError):
    """Adaptive quadrature failed its tolerance or the integrand is not integrable."""
    status_code = 422


class GridMismatchError(CBIError):
    status_code = 400
    exit_code = 2


class ConvergenceError(CBIError):
    """Projection or solver reached its iteration cap."""
    status_code = 500


class OverflowGuardError(CBIError):
    status_code = 422


class SimulationConfigError(CBIError):
    status_code = 400
    exit_code = 2


class ConfigError(CBIError):
    status_code = 400
    exit_code = 2


def to_http_exception(error: CBIError) -> HTTPException:
    return HTTPException(status_code=error.status_code, detail=error.to_response().model_dump())
