"""FastAPI service over a loaded checkpoint: sampling, noise prediction and metrics.

The model is loaded once and never mutated, so request handlers (run in the
server's thread pool) may sample concurrently.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__, metrics, runs
from ..errors import ContractError, Dit3DError, NumericError
from ..finetune import load_metadata, load_model
from ..model import NoisePredictor
from ..tensor import Tensor, no_grad
from ..transformer import attention_cost
from . import schemas

CHECKPOINT_ENV = "DIT3D_CHECKPOINT"


def create_app(checkpoint: Optional[str] = None, model: Optional[NoisePredictor] = None,
               meta: Optional[dict] = None) -> FastAPI:
    app = FastAPI(title="dit3d", version=__version__)
    checkpoint = checkpoint or os.environ.get(CHECKPOINT_ENV)
    if model is None and checkpoint:
        model = load_model(checkpoint)
        meta = load_metadata(checkpoint)
    app.state.model = model
    app.state.meta = meta or {}
    app.state.checkpoint = checkpoint

    @app.exception_handler(Dit3DError)
    def _dit3d_error(request: Request, exc: Dit3DError):
        status = 500 if isinstance(exc, NumericError) else 422
        return JSONResponse(status_code=status, content={"detail": str(exc), "type": type(exc).__name__})

    def need_model() -> NoisePredictor:
        if app.state.model is None:
            raise HTTPException(status_code=503, detail="no checkpoint loaded")
        return app.state.model

    @app.get("/health", response_model=schemas.Health)
    def health():
        return schemas.Health(status="ok", model_loaded=app.state.model is not None, version=__version__)

    @app.get("/model", response_model=schemas.ModelInfo)
    def model_info():
        m = need_model()
        return schemas.ModelInfo(
            checkpoint=app.state.checkpoint,
            config=m.config.to_dict(),
            class_names=app.state.meta.get("class_names", []),
            total_params=m.count_params(),
            trainable_params=m.count_params(trainable_only=True),
            n_points=app.state.meta.get("n_points", 256),
        )

    @app.post("/sample", response_model=schemas.SampleResponse)
    def sample(req: schemas.SampleRequest):
        m = need_model()
        meta = app.state.meta
        if req.class_id == "all":
            cid = [k % m.config.num_classes for k in range(req.count)]
        else:
            cid = runs.resolve_class(meta, req.class_id)
        n_points = req.points or meta.get("n_points", 256)
        x, seconds = runs.generate(m, req.count, n_points, cid, req.steps, req.guidance, req.seed)
        config = {"checkpoint": app.state.checkpoint, "count": req.count, "class": cid,
                  "steps": req.steps or m.config.T, "guidance": req.guidance, "seed": req.seed, "points": n_points}
        return schemas.SampleResponse(clouds=x.tolist(), seconds=seconds, digest=runs.clouds_digest(x), config=config)

    @app.post("/predict-noise", response_model=schemas.NoiseResponse)
    def predict_noise(req: schemas.NoiseRequest):
        m = need_model()
        pts = np.asarray(req.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ContractError("points must be a non-empty [N, 3] list")
        if req.t >= m.config.T:
            raise ContractError(f"t must be < {m.config.T}")
        with no_grad():
            out = m.predict_noise_cfg(pts, req.t, req.class_id, req.guidance)
        data = out.data if isinstance(out, Tensor) else out
        return schemas.NoiseResponse(noise=np.asarray(data, dtype=np.float64).tolist())

    @app.post("/metrics/distance", response_model=schemas.DistanceResponse)
    def distance(req: schemas.DistanceRequest):
        fn = metrics.DISTANCES[req.distance]
        return schemas.DistanceResponse(distance=req.distance, value=fn(np.asarray(req.x), np.asarray(req.y)))

    @app.post("/metrics/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(req: schemas.EvaluateRequest):
        S_g = [np.asarray(c, dtype=np.float64) for c in req.generated]
        S_r = [np.asarray(c, dtype=np.float64) for c in req.reference]
        return runs.evaluate_sets(S_g, S_r, req.metrics, seed=req.seed)

    @app.get("/attention-cost", response_model=schemas.AttentionCost)
    def cost(L: int, D: int, H: int, R: Optional[int] = None):
        return attention_cost(L, D, H, R)

    return app


def serve(checkpoint: Optional[str], host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(checkpoint), host=host, port=port)
