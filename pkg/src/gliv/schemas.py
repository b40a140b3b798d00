"""JSON report schemas. Every report embeds the manifest of the run that made it."""
from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, ConfigDict


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="null")


class RunManifest(_Model):
    command: str
    config: Optional[str] = None
    dataset: Optional[str] = None
    flags: dict[str, Any]
    seed: Optional[int] = None
    version: str
    timestamp: Optional[str] = None


class ParameterRow(_Model):
    parameter: str
    estimate: Optional[float]
    se: Optional[float]


class DerivedRow(_Model):
    name: str
    estimate: float
    se: float


class EstimateReportModel(_Model):
    kind: str = "estimate"
    manifest: RunManifest
    n: int
    learner: str
    trim_floor: float
    rows: list[ParameterRow]
    covariance: list[list[float]]
    v_hat: list[list[float]]
    residual_p0: dict[str, float]
    derived: list[DerivedRow] = []
    warnings: list[str] = []


class DmlRow(_Model):
    parameter: str
    estimate: float
    variance: float
    se: float


class DmlReportModel(_Model):
    kind: str = "dml"
    manifest: RunManifest
    n: int
    folds: int
    learner: str
    trim_floor: float
    rows: list[DmlRow]


class GmmReportModel(_Model):
    kind: str = "gmm"
    manifest: RunManifest
    n: int
    spec: dict[str, Any]
    eta_hat: list[float]
    standard_errors: list[float]
    first_stage_eta: list[float]
    covariance: list[list[float]]
    V_hat: list[list[float]]
    Gamma_hat: list[list[float]]
    objective_value: float
    first_stage_objective: float
    epsilon_n: float
    pinv_weighting: bool
    notes: list[str] = []
    warnings: list[str] = []


class RangeRow(_Model):
    t: str
    k: int
    bin: int
    cell: list[float]
    q: float
    se: float
    violation: float
    tolerance: float
    flagged: bool


class EqualityRow(_Model):
    relation: str
    automatic: bool
    cell: list[float]
    discrepancy: float
    se: float
    tolerance: float
    flagged: bool


class ImplicationReportModel(_Model):
    kind: str = "implications"
    manifest: RunManifest
    note: str
    passed: bool
    tolerance_mode: str
    breakpoints: list[float]
    max_violation: float
    max_discrepancy: float
    n_flagged: int
    informative_inequalities: list[str]
    ranges: list[RangeRow]
    equalities: list[EqualityRow]


class McRowModel(_Model):
    parameter: str
    value: float
    mean_bias: Optional[float]
    median_bias: Optional[float]
    std: Optional[float]
    rmse: Optional[float]
    successes: int


class SimulationReportModel(_Model):
    kind: str = "simulation"
    manifest: RunManifest
    dgp: dict[str, Any]
    reps: int
    estimator: str
    learner: str
    rows: list[McRowModel]
    efficiency_ratio: dict[str, Optional[float]]
    coverage: dict[str, Optional[float]]
    failures: list[str]


REPORT_MODELS = {
    "estimate": EstimateReportModel,
    "dml": DmlReportModel,
    "gmm": GmmReportModel,
    "implications": ImplicationReportModel,
    "simulation": SimulationReportModel,
}


def load_report(text):
    """Validate a report JSON string against the schema named by its kind."""
    import json

    data = json.loads(text)
    model = REPORT_MODELS.get(data.get("kind"))
    if model is None:
        raise ValueError(f"unknown report kind {data.get('kind')!r}")
    return model.model_validate(data)
