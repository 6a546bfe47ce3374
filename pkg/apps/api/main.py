from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterator
from typing import Annotated

from dotenv import load_dotenv

load_dotenv(override=False)

from fastapi import Depends, FastAPI, HTTPException, status
from fastapi.responses import StreamingResponse
from pydantic import ValidationError

from apps.api.auth import verify_api_key
from apps.api.config import Settings, get_settings
from packages.critheat_core.domain.errors import ConfigError, CritHeatError
from packages.critheat_lab.artifacts import ArtifactStore
from packages.critheat_lab.config_loader import parse_raw
from packages.critheat_lab.domain.models import ExperimentDescriptor, SolverConfig
from packages.critheat_lab.logging_utils import setup_logging
from packages.critheat_lab.models import RunManifest, RunRequest, RunResponse
from packages.critheat_lab.orchestrator import ExperimentOrchestrator

app = FastAPI(title="critheat-lab API", version="0.1.0")
logger = logging.getLogger(__name__)

_RUN_ID = re.compile(r"^[a-z0-9][a-z0-9-]*$")


def get_orchestrator(
    settings: Annotated[Settings, Depends(get_settings)],
) -> ExperimentOrchestrator:
    return ExperimentOrchestrator(
        ArtifactStore(settings.out_dir), default_workers=settings.resolved_workers()
    )


def _invalid_config(exc: CritHeatError | ValidationError) -> HTTPException:
    key_path = exc.key_path if isinstance(exc, ConfigError) else None
    return HTTPException(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        detail={"code": "INVALID_CONFIG", "message": str(exc), "key_path": key_path},
    )


def _parse(request: RunRequest) -> tuple[SolverConfig, ExperimentDescriptor]:
    flags = {"seed": request.seed, "replicas": request.replicas, "workers": request.workers}
    try:
        return parse_raw(request.config, request.overrides, flags)
    except (CritHeatError, ValidationError) as exc:
        raise _invalid_config(exc) from exc


@app.on_event("startup")
def on_startup() -> None:
    settings = get_settings()
    setup_logging(settings.log_level)
    logger.info("api_started", extra={"event": "startup", "workers": settings.workers})


@app.get("/health")
def health() -> dict[str, str]:
    return {"status": "ok"}


@app.post("/runs", response_model=RunResponse, dependencies=[Depends(verify_api_key)])
def create_run(
    request: RunRequest,
    orchestrator: Annotated[ExperimentOrchestrator, Depends(get_orchestrator)],
) -> RunResponse:
    config, descriptor = _parse(request)
    try:
        return orchestrator.run(request.subcommand, config, descriptor)
    except (CritHeatError, ValidationError) as exc:
        raise _invalid_config(exc) from exc
    except RuntimeError as exc:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail={"code": "RUN_FAILED", "message": str(exc)},
        ) from exc


def _sse_stream(
    request: RunRequest,
    config: SolverConfig,
    descriptor: ExperimentDescriptor,
    orchestrator: ExperimentOrchestrator,
) -> Iterator[bytes]:
    """Yield SSE bytes: each event as data line + newlines."""
    try:
        for event in orchestrator.run_stream(request.subcommand, config, descriptor):
            event_type = event.get("type", "message")
            yield f"event: {event_type}\ndata: {json.dumps(event)}\n\n".encode()
    except CritHeatError as exc:
        payload = {"type": "error", "message": str(exc)}
        yield f"event: error\ndata: {json.dumps(payload)}\n\n".encode()


@app.post("/runs/stream", dependencies=[Depends(verify_api_key)])
def create_run_stream(
    request: RunRequest,
    orchestrator: Annotated[ExperimentOrchestrator, Depends(get_orchestrator)],
) -> StreamingResponse:
    config, descriptor = _parse(request)
    return StreamingResponse(
        _sse_stream(request, config, descriptor, orchestrator),
        media_type="text/event-stream",
        headers={"Cache-Control": "no-cache", "X-Accel-Buffering": "no"},
    )


@app.get(
    "/runs/{run_id}/manifest",
    response_model=RunManifest,
    dependencies=[Depends(verify_api_key)],
)
def get_manifest(
    run_id: str,
    settings: Annotated[Settings, Depends(get_settings)],
) -> RunManifest:
    manifest = None
    if _RUN_ID.match(run_id):
        manifest = ArtifactStore(settings.out_dir).load_manifest(run_id)
    if manifest is None:
        raise HTTPException(status_code=404, detail="Manifest not found for this run_id.")
    return manifest
