from __future__ import annotations

import hmac
import logging
from typing import Annotated

from fastapi import Depends, Header, HTTPException, Request, status

from apps.api.config import Settings, get_settings
from packages.critheat_lab.logging_utils import run_context

logger = logging.getLogger(__name__)


def _rejected(request: Request, code: str, status_code: int, message: str) -> HTTPException:
    """Log the refused call against the run it names, then build the error."""
    run_id = request.path_params.get("run_id")
    subcommand = run_id.rsplit("-", 1)[0] if run_id else None
    logger.warning(code.lower(), extra=run_context(run_id, subcommand, event="auth"))
    return HTTPException(status_code=status_code, detail={"code": code, "message": message})


def verify_api_key(
    request: Request,
    settings: Annotated[Settings, Depends(get_settings)],
    x_api_key: Annotated[str | None, Header(alias="X-API-Key")] = None,
) -> None:
    """Gate run submission and artifact reads on X-API-Key when REQUIRE_API_KEY is on."""
    if not settings.require_api_key:
        return
    if not settings.api_key:
        raise _rejected(
            request,
            "API_KEY_NOT_CONFIGURED",
            status.HTTP_500_INTERNAL_SERVER_ERROR,
            "REQUIRE_API_KEY is set but API_KEY is empty; no run can be submitted.",
        )
    if x_api_key is None or not hmac.compare_digest(x_api_key, settings.api_key):
        raise _rejected(
            request,
            "INVALID_API_KEY",
            status.HTTP_401_UNAUTHORIZED,
            "Invalid X-API-Key header.",
        )
