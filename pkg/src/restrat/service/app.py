"""FastAPI application: assign, analyze, quantile, and simulate endpoints."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import (
    AttemptsExhausted,
    DomainError,
    EmptyArm,
    InsufficientArm,
    MissingPotentialOutcomes,
    ParseError,
    PopulationError,
    SingularCovariance,
)
from . import handlers, schemas


def create_app() -> FastAPI:
    app = FastAPI(
        title="restrat",
        version=__version__,
        description=(
            "Stratified rerandomization as a service: draw balanced treatment"
            " assignments, analyze completed experiments with conservative"
            " confidence intervals, compute truncated-normal quantiles, and run"
            " replication studies."
        ),
    )

    validation_errors = (
        PopulationError,
        DomainError,
        InsufficientArm,
        EmptyArm,
        MissingPotentialOutcomes,
        SingularCovariance,
        ParseError,
    )

    @app.exception_handler(AttemptsExhausted)
    async def _attempts(request: Request, exc: AttemptsExhausted):
        return JSONResponse(
            status_code=409,
            content={"error": {"type": "attempts_exhausted", "message": str(exc)}},
        )

    for err_type in validation_errors:
        @app.exception_handler(err_type)
        async def _invalid(request: Request, exc: Exception):
            return JSONResponse(
                status_code=400,
                content={"error": {"type": type(exc).__name__, "message": str(exc)}},
            )

    @app.get("/healthz", response_model=schemas.HealthResponse)
    def healthz():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/assign", response_model=schemas.AssignResponse)
    def assign(req: schemas.AssignRequest):
        return handlers.assign(req)

    @app.post("/analyze", response_model=schemas.AnalyzeResponse)
    def analyze(req: schemas.AnalyzeRequest):
        return handlers.analyze(req)

    @app.post("/quantile", response_model=schemas.QuantileResponse)
    def quantile(req: schemas.QuantileRequest):
        return handlers.quantile(req)

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(req: schemas.SimulateRequest):
        return handlers.simulate(req)

    return app


app = create_app()
