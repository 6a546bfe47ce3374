from __future__ import annotations

import json
import logging

from packages.critheat_lab.logging_utils import JsonFormatter, run_context


def _record(**extra: object) -> logging.LogRecord:
    record = logging.LogRecord("critheat", logging.INFO, __file__, 1, "run_completed", None, None)
    record.__dict__.update(extra)
    return record


def test_run_context_drops_missing_fields() -> None:
    assert run_context(None, "simulate", event="error") == {
        "subcommand": "simulate",
        "event": "error",
    }
    assert run_context("couple-abc", "couple", replicas=None) == {
        "run_id": "couple-abc",
        "subcommand": "couple",
    }


def test_formatter_writes_the_run_fields() -> None:
    extra = run_context("verify-l1-abc", "verify-l1", event="run", status="pass", exit_code=0)
    line = json.loads(JsonFormatter().format(_record(**extra, unrelated="x")))
    assert line["message"] == "run_completed"
    assert line["level"] == "INFO"
    assert line["run_id"] == "verify-l1-abc"
    assert line["subcommand"] == "verify-l1"
    assert line["exit_code"] == 0
    assert "unrelated" not in line
