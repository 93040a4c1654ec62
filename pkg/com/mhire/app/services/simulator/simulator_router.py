import logging

from fastapi import APIRouter, HTTPException
from starlette.concurrency import run_in_threadpool

from com.mhire.app.services.errors import CBIError, ErrorResponse, to_http_exception
from com.mhire.app.services.mechanism_core.mechanism_schema import BranchingMechanism, ImmigrationSpec
from com.mhire.app.services.simulator.simulator import simulate_path
from com.mhire.app.services.simulator.simulator_schema import SimConfig, SimulationRequest, SimulationResponse

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/v1/simulator",
    tags=["simulator"],
    responses={
        400: {"model": ErrorResponse, "description": "Invalid simulation settings"},
        500: {"model": ErrorResponse, "description": "Internal server error"}
    }
)


def _simulate(request: SimulationRequest) -> SimulationResponse:
    cfg = SimConfig(
        mech=BranchingMechanism(b=request.b, c=request.c),
        imm=ImmigrationSpec(beta=request.beta, density=request.density),
        **request.model_dump(include={"scheme", "substeps", "small_jump_cutoff", "burn_in", "seed", "x0", "delta"}),
    )
    sample = simulate_path(cfg, request.n)
    return SimulationResponse(
        status="success",
        message=f"Simulated {request.n} intervals",
        values=sample.series.values.tolist(),
        delta=cfg.delta,
        jumps_emitted=sample.jumps_emitted,
        scheme_used=sample.scheme_used,
        seed=cfg.seed,
    )


@router.post("/path",
    response_model=SimulationResponse,
    summary="Simulate a CIR path with jumps",
    description="""Simulates X_0, ..., X_n at spacing delta with the exact CIR transition between
    jump epochs (or an Euler scheme) after a burn-in. Identical requests return identical paths."""
)
async def simulate(request: SimulationRequest) -> SimulationResponse:
    try:
        return await run_in_threadpool(_simulate, request)
    except CBIError as e:
        logger.error(f"Simulation failed: {e}")
        raise to_http_exception(e)
    except HTTPException as he:
        raise he
    except Exception as e:
        logger.error(f"Error handling request: {str(e)}")
        raise HTTPException(status_code=500, detail="Internal server error")
