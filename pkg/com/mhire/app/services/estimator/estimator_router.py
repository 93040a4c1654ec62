import logging

from fastapi import APIRouter, HTTPException
from starlette.concurrency import run_in_threadpool

from com.mhire.app.services.density_space.density_schema import dyadic_breakpoints, trapezoid_grid
from com.mhire.app.services.density_space.density_space import default_constraint_set
from com.mhire.app.services.errors import CBIError, ErrorResponse, to_http_exception
from com.mhire.app.services.estimator.estimator_schema import EstimateRequest, EstimateResponse, ObservationSeries
from com.mhire.app.services.harness.harness import build_operators, estimate_routes
from com.mhire.app.services.mechanism_core.mechanism_schema import BranchingMechanism

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/v1/estimator",
    tags=["estimator"],
    responses={
        400: {"model": ErrorResponse, "description": "Bad request"},
        422: {"model": ErrorResponse, "description": "Empirical transform out of range"},
        500: {"model": ErrorResponse, "description": "Internal server error"}
    }
)


def _estimate(request: EstimateRequest) -> EstimateResponse:
    series = ObservationSeries(request.values, delta=request.delta)
    mech = BranchingMechanism(b=request.b, c=request.c)
    lgrid = trapezoid_grid(request.lambda_max, request.n_lambda)
    breakpoints = dyadic_breakpoints(request.z_min_exp, request.z_max_exp, request.cells_per_block)
    cs = default_constraint_set(breakpoints, request.R, request.mode)
    operators = build_operators(mech, request.beta, breakpoints, lgrid, series.delta, request.routes)
    results = estimate_routes(series, mech, operators, cs, lgrid)
    return EstimateResponse(
        status="success",
        message=f"Estimated from {series.n} transitions",
        reports={route: report for route, (report, _) in results.items()},
    )


@router.post("/fit",
    response_model=EstimateResponse,
    summary="Estimate the immigration jump density",
    description="""Fits the jump density by weighted least squares between the empirical and
    model log-Laplace curves, over a dyadic z-grid under monotone or bounded-variation constraints.
    Route g1 uses the stationary transform, route g2 the one-step conditional transform."""
)
async def estimate(request: EstimateRequest) -> EstimateResponse:
    try:
        return await run_in_threadpool(_estimate, request)
    except CBIError as e:
        logger.error(f"Estimation failed: {e}")
        raise to_http_exception(e)
    except ValueError as e:
        logger.error(f"Invalid observations: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except HTTPException as he:
        raise he
    except Exception as e:
        logger.error(f"Error handling request: {str(e)}")
        raise HTTPException(status_code=500, detail="Internal server error")
