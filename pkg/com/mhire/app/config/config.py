import os
from dotenv import load_dotenv

load_dotenv()


def _float_env(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _int_env(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


class Config:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
            # Output and parallelism
            cls._instance.output_root = os.getenv("CBI_OUTPUT_ROOT", "./output")
            cls._instance.workers = _int_env("CBI_WORKERS", 1)
            cls._instance.log_level = os.getenv("CBI_LOG_LEVEL", "INFO").upper()

            # Adaptive quadrature
            cls._instance.quad_epsabs = _float_env("CBI_QUAD_EPSABS", 1e-10)
            cls._instance.quad_epsrel = _float_env("CBI_QUAD_EPSREL", 1e-8)
            cls._instance.quad_limit = _int_env("CBI_QUAD_LIMIT", 200)
            cls._instance.tail_tol = _float_env("CBI_TAIL_TOL", 1e-10)

            # Solver and projection
            cls._instance.solver_tol = _float_env("CBI_SOLVER_TOL", 1e-8)
            cls._instance.solver_max_iter = _int_env("CBI_SOLVER_MAX_ITER", 100_000)
            cls._instance.projection_tol = _float_env("CBI_PROJECTION_TOL", 1e-10)
            cls._instance.projection_max_iter = _int_env("CBI_PROJECTION_MAX_ITER", 10_000)

            # Monte-Carlo acceptance
            cls._instance.se_multiple = _float_env("CBI_SE_MULTIPLE", 3.0)

        return cls._instance

    @classmethod
    def reload(cls) -> "Config":
        """Drop the cached instance and re-read the environment."""
        cls._instance = None
        return cls()
