import logging

from fastapi import APIRouter, HTTPException
from starlette.concurrency import run_in_threadpool

from com.mhire.app.services.errors import CBIError, ErrorResponse, FlowDomainError, to_http_exception
from com.mhire.app.services.mechanism_core.mechanism import (
    admissible_lambda_max,
    asymptotic_variance_W,
    check_ergodicity,
    phi,
    psi,
    stationary_laplace,
    stationary_mean,
    transition_laplace,
    v_flow,
)
from com.mhire.app.services.mechanism_core.mechanism_schema import (
    BranchingMechanism,
    ImmigrationSpec,
    LaplacePoint,
    MechanismRequest,
    MechanismResponse,
)

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/v1/mechanism",
    tags=["mechanism"],
    responses={
        404: {"model": ErrorResponse, "description": "Not found"},
        422: {"model": ErrorResponse, "description": "Argument outside the flow domain"},
        500: {"model": ErrorResponse, "description": "Internal server error"}
    }
)


def _optional(func, *args):
    # points outside the domain of one transform still report the others
    try:
        return func(*args)
    except FlowDomainError:
        return None


def _evaluate(request: MechanismRequest) -> MechanismResponse:
    mech = BranchingMechanism(b=request.b, c=request.c)
    imm = ImmigrationSpec(beta=request.beta, density=request.density)
    try:
        ergodicity = check_ergodicity(mech, imm)
    except CBIError as e:
        logger.warning(f"Stationary law unavailable: {e}")
        ergodicity = None

    points = []
    for lam in request.lambdas:
        point = LaplacePoint(
            lam=lam,
            v_t=float(v_flow(mech, request.t, lam)),
            phi=float(phi(mech, lam)),
            psi=_optional(lambda z: float(psi(imm, z)), lam),
            transition_laplace=_optional(transition_laplace, mech, imm, request.x, request.t, lam),
        )
        if ergodicity is not None and lam >= 0:
            point.stationary_laplace = stationary_laplace(mech, imm, lam)
            if request.include_variance:
                point.asymptotic_variance = _optional(asymptotic_variance_W, mech, imm, lam, request.t)
        points.append(point)

    limit = None
    positive = [lam for lam in request.lambdas if lam > 0]
    if request.include_variance and ergodicity is not None and positive:
        limit = admissible_lambda_max(mech, imm, max(positive), request.t)
    return MechanismResponse(
        status="success",
        message=f"Evaluated {len(points)} lambda values",
        stationary_mean=stationary_mean(mech, imm),
        ergodicity_integral=ergodicity,
        admissible_lambda_max=limit,
        points=points,
    )


@router.post("/laplace",
    response_model=MechanismResponse,
    summary="Evaluate the cumulant flow and Laplace transforms",
    description="""For a branching mechanism phi(z) = b z + c z^2 and immigration rate psi,
    returns v_t(lambda), phi, psi, the transition and stationary Laplace transforms and,
    on request, the asymptotic variance W(lambda) with the admissible lambda range."""
)
async def evaluate_laplace(request: MechanismRequest) -> MechanismResponse:
    try:
        return await run_in_threadpool(_evaluate, request)
    except CBIError as e:
        logger.error(f"Mechanism evaluation failed: {e}")
        raise to_http_exception(e)
    except HTTPException as he:
        raise he
    except Exception as e:
        logger.error(f"Error handling request: {str(e)}")
        raise HTTPException(status_code=500, detail="Internal server error")
