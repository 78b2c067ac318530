from typing import Any, Dict, List, Optional

from pydantic import BaseModel


class CheckResult(BaseModel):
    name: str
    value: float
    bound: float
    passed: bool
    comparison: str = "<="
    anchor: str = ""


class ScenarioInfo(BaseModel):
    name: str
    description: str
    dimensions: str
    runtime: str
    anchor: str


class ScenarioReport(BaseModel):
    """Deterministic outcome of one scenario run; timings live in RunArtifacts."""
    scenario: str
    anchor: str
    seed: int
    passed: bool
    checks: List[CheckResult] = []
    metrics: Dict[str, Any] = {}
    tables: List[str] = []
    failure: Optional[str] = None


class RunArtifacts(BaseModel):
    scenario: str
    output_dir: str
    files: Dict[str, str] = {}
    timings: Dict[str, float] = {}
    exit_code: int = 0
