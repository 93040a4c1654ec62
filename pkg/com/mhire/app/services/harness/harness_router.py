import logging
from collections import Counter

from fastapi import APIRouter, HTTPException
from starlette.concurrency import run_in_threadpool

from com.mhire.app.services.errors import CBIError, ErrorResponse, to_http_exception
from com.mhire.app.services.harness.harness import cmd_validate
from com.mhire.app.services.harness.harness_schema import ValidateRequest, ValidateResponse

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/v1/harness",
    tags=["harness"],
    responses={
        500: {"model": ErrorResponse, "description": "Internal server error"}
    }
)


@router.post("/validate",
    response_model=ValidateResponse,
    summary="Run the validation suite",
    description="""Runs the flow, transform, operator, solver and martingale checks.
    Quick mode uses smaller grids and Monte-Carlo sizes and skips the ergodic convergence run."""
)
async def validate(request: ValidateRequest) -> ValidateResponse:
    try:
        report = await run_in_threadpool(cmd_validate, request.quick)
        counts = Counter(check.status for check in report.checks)
        return ValidateResponse(
            status="success",
            message=f"{counts.get('pass', 0)} of {len(report.checks)} checks passed",
            passed=report.passed,
            checks=report.checks,
            summary={status: counts.get(status, 0) for status in ("pass", "fail", "skip")},
        )
    except CBIError as e:
        logger.error(f"Validation failed: {e}")
        raise to_http_exception(e)
    except HTTPException as he:
        raise he
    except Exception as e:
        logger.error(f"Error handling request: {str(e)}")
        raise HTTPException(status_code=500, detail="Internal server error")
