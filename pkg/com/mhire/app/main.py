import logging

from fastapi import FastAPI
from fastapi import status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import PlainTextResponse

from com.mhire.app.config.config import Config
from com.mhire.app.services.estimator.estimator_router import router as estimator_router
from com.mhire.app.services.harness.harness_router import router as harness_router
from com.mhire.app.services.mechanism_core.mechanism_router import router as mechanism_router
from com.mhire.app.services.simulator.simulator_router import router as simulator_router

logging.basicConfig(level=Config().log_level)

app = FastAPI(
    title="CBI Jump Density Estimation Service",
    description="API for simulating CIR processes with jumps and estimating the immigration jump density",
    version="1.0.0"
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # In production, replace with specific origins
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Register routers
app.include_router(mechanism_router)
app.include_router(simulator_router)
app.include_router(estimator_router)
app.include_router(harness_router)


@app.get("/", status_code=status.HTTP_200_OK, response_class=PlainTextResponse)
async def health_check():
    return "CBI Jump Density Estimation Service is running and healthy"
