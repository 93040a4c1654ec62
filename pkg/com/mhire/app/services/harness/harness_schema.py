from typing import ClassVar, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field

CheckStatus = Literal["pass", "fail", "skip"]


class CheckResult(BaseModel):
    name: str
    status: CheckStatus
    detail: str = ""
    value: Optional[float] = None
    threshold: Optional[float] = None


class ValidationReport(BaseModel):
    mode: Literal["quick", "full"]
    fault: Optional[str] = None
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.status != "fail" for check in self.checks)

    def table(self) -> str:
        width = max([len(check.name) for check in self.checks] + [5])
        lines = [f"{'check':<{width}}  status  detail"]
        for check in self.checks:
            lines.append(f"{check.name:<{width}}  {check.status:<6}  {check.detail}")
        return "\n".join(lines)


class BenchmarkRow(BaseModel):
    n: int
    replicate: int
    g1_err_w: float = Field(description="||g1_hat - g||_w^2")
    k1_err_mu: float = Field(description="||k1_hat - k||_mu")
    g2_err_w_scaled: float = Field(description="n ||g2_hat - g||_w^2")
    k2_err_mu: float
    iterations_g1: int
    iterations_g2: int
    inequality_ok: bool
    failed: bool = False
    runtime_s: float = Field(default=0.0, exclude=True)

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = (
        "n", "replicate", "g1_err_w", "k1_err_mu", "g2_err_w_scaled", "k2_err_mu",
        "iterations_g1", "iterations_g2", "inequality_ok", "failed",
    )

    def csv_fields(self) -> List[str]:
        values = self.model_dump()
        fields = []
        for column in self.CSV_COLUMNS:
            value = values[column]
            if isinstance(value, bool):
                fields.append(str(int(value)))
            elif isinstance(value, float):
                fields.append(format(value, ".17g"))
            else:
                fields.append(str(value))
        return fields


# Request / response models for the harness router

class ValidateRequest(BaseModel):
    quick: bool = True


class ValidateResponse(BaseModel):
    status: str
    message: str
    passed: bool
    checks: List[CheckResult]
    summary: Dict[str, int]
