"""
Timbre Engine Structured Logging.
JSON log records enriched with the current run and command.
"""
import json
import logging
import sys
import uuid
from contextvars import ContextVar
from datetime import datetime, timezone
from typing import Any, Dict

# Context variables for run tracking
run_id_ctx: ContextVar[str] = ContextVar("run_id", default="")
command_ctx: ContextVar[str] = ContextVar("command", default="")


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


class StructuredLogger:
    """
    Logger that attaches keyword fields and run context to every record.
    Output format is decided by the root handler (see setup_structured_logging).
    """

    def __init__(self, name: str):
        self.logger = logging.getLogger(name)

    def _enrich(self, extra: Dict[str, Any]) -> Dict[str, Any]:
        """Enrich log with context variables."""
        enriched = {
            "run_id": run_id_ctx.get(""),
            "command": command_ctx.get(""),
            "service": "timbre-engine",
        }
        enriched.update(extra)
        return enriched

    def info(self, message: str, **kwargs: Any) -> None:
        self.logger.info(message, extra={"extra": self._enrich(kwargs)})

    def warning(self, message: str, **kwargs: Any) -> None:
        self.logger.warning(message, extra={"extra": self._enrich(kwargs)})

    def error(self, message: str, **kwargs: Any) -> None:
        self.logger.error(message, extra={"extra": self._enrich(kwargs)})

    def debug(self, message: str, **kwargs: Any) -> None:
        self.logger.debug(message, extra={"extra": self._enrich(kwargs)})

    def exception(self, message: str, **kwargs: Any) -> None:
        self.logger.exception(message, extra={"extra": self._enrich(kwargs)})


class JSONFormatter(logging.Formatter):
    """One JSON object per log record."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            "timestamp": _utcnow(),
            "level": record.levelname,
            "message": record.getMessage(),
            "logger": record.name,
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        # Add extra fields if present
        if hasattr(record, "extra"):
            log_entry.update(record.extra)

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_entry, default=str)


class KeyValueFormatter(logging.Formatter):
    """Human-readable variant: message followed by key=value fields."""

    def format(self, record: logging.LogRecord) -> str:
        base = f"{record.levelname:<7} {record.name}: {record.getMessage()}"
        extra = getattr(record, "extra", None)
        if extra:
            fields = " ".join(f"{k}={v}" for k, v in extra.items() if v not in ("", None))
            base = f"{base} {fields}"
        if record.exc_info:
            base = f"{base}\n{self.formatException(record.exc_info)}"
        return base


def setup_structured_logging(level: str = "INFO", json_output: bool = True) -> None:
    """Configure logging for the process. Logs go to stderr; stdout carries command output."""
    log_level = getattr(logging, level.upper(), logging.INFO)

    root = logging.getLogger()
    root.setLevel(log_level)
    root.handlers = []

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JSONFormatter() if json_output else KeyValueFormatter())
    root.addHandler(handler)

    # Reduce noise from third-party libraries
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def start_run(command: str) -> str:
    """Bind a fresh run id and the command name to the logging context."""
    run_id = uuid.uuid4().hex[:12]
    run_id_ctx.set(run_id)
    command_ctx.set(command)
    return run_id


# Global structured logger
structured_logger = StructuredLogger("timbre")
