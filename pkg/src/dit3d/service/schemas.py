"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, Field

Cloud = list[list[float]]


class Health(BaseModel):
    status: str
    model_loaded: bool
    version: str


class ModelInfo(BaseModel):
    checkpoint: Optional[str]
    config: dict
    class_names: list[str]
    total_params: int
    trainable_params: int
    n_points: int


class SampleRequest(BaseModel):
    count: int = Field(1, ge=1, le=256)
    class_id: Optional[Union[int, str]] = Field(None, description="class id, class name, 'all' or null")
    steps: Optional[int] = Field(None, ge=1)
    guidance: float = Field(0.0, ge=0.0)
    seed: int = 0
    points: Optional[int] = Field(None, ge=1)


class SampleResponse(BaseModel):
    clouds: list[Cloud]
    seconds: float
    digest: str
    config: dict


class NoiseRequest(BaseModel):
    points: Cloud
    t: int = Field(..., ge=0)
    class_id: Optional[int] = None
    guidance: float = Field(0.0, ge=0.0)


class NoiseResponse(BaseModel):
    noise: Cloud


class DistanceRequest(BaseModel):
    x: Cloud
    y: Cloud
    distance: Literal["cd", "emd"] = "cd"


class DistanceResponse(BaseModel):
    distance: str
    value: float


class EvaluateRequest(BaseModel):
    generated: list[Cloud] = Field(..., min_length=1)
    reference: list[Cloud] = Field(..., min_length=1)
    metrics: list[Literal["cd", "emd"]] = ["cd", "emd"]
    seed: Optional[int] = None


class MetricRowOut(BaseModel):
    metric: str
    distance: str
    value: float
    n_generated: int
    n_reference: int
    degenerate: bool
    seed: Optional[int] = None


class EvaluateResponse(BaseModel):
    rows: list[MetricRowOut]
    warnings: list[str]


class AttentionCost(BaseModel):
    score_elements: int
    flops_estimate: int
