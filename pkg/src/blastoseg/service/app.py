"""FastAPI application exposing the pipeline handlers.

Domain errors map to stable JSON bodies: {"error": {"code", "message"}}.
Validation-class failures return 400, checkpoint mismatches 409, and a
diverged training run 500.
"""

import re

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import BlastosegError, CheckpointError, TrainingDiverged
from . import handlers, schemas


def _error_code(exc):
    """CheckpointError -> checkpoint_error, etc."""
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(exc).__name__).lower()


def _status_for(exc):
    if isinstance(exc, TrainingDiverged):
        return 500
    if isinstance(exc, CheckpointError):
        return 409
    return 400


def create_app():
    app = FastAPI(title="blastoseg", version=__version__)

    @app.exception_handler(BlastosegError)
    async def domain_error(_request, exc):
        body = schemas.ErrorBody(
            error=schemas.ErrorInfo(code=_error_code(exc), message=str(exc)))
        return JSONResponse(status_code=_status_for(exc), content=body.model_dump())

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/generate", response_model=schemas.GenerateResponse)
    def generate(req: schemas.GenerateRequest):
        return handlers.handle_generate(req)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return handlers.handle_train(req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        return handlers.handle_eval(req)

    @app.post("/segment", response_model=schemas.SegmentResponse)
    def segment(req: schemas.SegmentRequest):
        return handlers.handle_segment(req)

    @app.post("/sweep", response_model=schemas.SweepResponse)
    def sweep(req: schemas.SweepRequest):
        return handlers.handle_sweep(req)

    return app
