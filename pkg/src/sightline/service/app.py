"""FastAPI service wrapping the detection and benchmarking library.

Endpoints map one-to-one onto the CLI subcommands; request bodies carry
the full run configuration (file paths are resolved on the service host).
Library errors map to HTTP 422 with the error class name so thin clients
can report them faithfully.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import SightlineError
from . import ops, schemas


def create_app() -> FastAPI:
    app = FastAPI(title="sightline", version=__version__)

    @app.exception_handler(SightlineError)
    async def _sightline_error(_request: Request, exc: SightlineError) -> JSONResponse:
        return JSONResponse(
            status_code=422,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.exception_handler(ValueError)
    async def _value_error(_request: Request, exc: ValueError) -> JSONResponse:
        # domain type invariant violations (bad thresholds, reps < 2, ...)
        return JSONResponse(
            status_code=422,
            content={"error": "ValueError", "detail": str(exc)},
        )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/detect", response_model=schemas.DetectResponse)
    def detect(req: schemas.DetectRequest) -> schemas.DetectResponse:
        return ops.run_detect(req)

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(req: schemas.BenchRequest) -> schemas.BenchResponse:
        return ops.run_bench(req)

    @app.post("/sweep", response_model=schemas.SweepResponse)
    def sweep(req: schemas.SweepRequest) -> schemas.SweepResponse:
        return ops.run_sweep(req)

    @app.post("/tile-bench", response_model=schemas.TileBenchResponse)
    def tile_bench(req: schemas.TileBenchRequest) -> schemas.TileBenchResponse:
        return ops.run_tile_bench(req)

    @app.post("/select", response_model=schemas.SelectResponse)
    def select(req: schemas.SelectRequest) -> schemas.SelectResponse:
        return ops.run_select(req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_detections(req: schemas.EvalRequest) -> schemas.EvalResponse:
        return ops.run_eval(req)

    return app
