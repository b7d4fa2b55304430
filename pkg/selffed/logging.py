"""
Structured logging for selffed runs.

Console lines are colored and lead with the round they belong to, so a
training log reads as a timeline:

    14:02:11 [   INFO] p1 r3  Aggregated 2 updates  loss=0.02131
    14:02:11 [  DEBUG] p1 r3 c4  Client update  loss=0.0297 duration=0.81

Optional file logging writes the same records as JSON lines; training
curves can be rebuilt from it.

Usage:
    from selffed.logging import get_logger, round_logger
    logger = get_logger("federation")
    log = round_logger(logger, run_id, phase=1, round_index=3)
    log.info("Aggregated 2 updates", extra={"loss": 0.0213})
"""

import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np


COLORS = {
    "DEBUG": "\033[36m",     # cyan
    "INFO": "\033[32m",      # green
    "WARNING": "\033[33m",   # yellow
    "ERROR": "\033[31m",     # red
    "RESET": "\033[0m",
}

# Extra fields that get included in structured output
_EXTRA_FIELDS = ("run_id", "phase", "round", "client_id", "loss", "duration")
# Shown after the message on the console; the rest go into the round tag
_METRIC_FIELDS = ("loss", "duration")


def _plain(value: Any) -> Any:
    """numpy scalars become builtins so both formatters print them alike."""
    return value.item() if isinstance(value, np.generic) else value


def round_tag(record: logging.LogRecord) -> str:
    """``p1 r3 c4`` for a record carrying phase, round and client id."""
    parts = []
    for key, short in (("phase", "p"), ("round", "r"), ("client_id", "c")):
        val = getattr(record, key, None)
        if val is not None:
            parts.append(f"{short}{_plain(val)}")
    return " ".join(parts)


class HumanFormatter(logging.Formatter):
    """Colored, readable log format for terminals."""

    def format(self, record: logging.LogRecord) -> str:
        level = record.levelname
        color = COLORS.get(level, "")
        reset = COLORS["RESET"]
        ts = datetime.now(timezone.utc).strftime("%H:%M:%S")

        tag = round_tag(record)
        metrics = ""
        for key in _METRIC_FIELDS:
            val = _plain(getattr(record, key, None))
            if val is not None:
                if isinstance(val, float):
                    val = f"{val:.4g}"
                metrics += f" {key}={val}"

        line = f"{color}{ts} [{level:>7}]{reset} "
        line += f"{tag}  {record.getMessage()}" if tag else record.getMessage()
        if metrics:
            line += f" {metrics}"
        if record.exc_info and record.exc_info[1]:
            line += "\n" + self.formatException(record.exc_info)
        return line


class JsonFormatter(logging.Formatter):
    """JSON lines format for machine parsing of training curves."""

    def format(self, record: logging.LogRecord) -> str:
        data = {
            "ts": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        for key in _EXTRA_FIELDS:
            val = getattr(record, key, None)
            if val is not None:
                data[key] = _plain(val)
        if record.exc_info and record.exc_info[1]:
            data["error"] = str(record.exc_info[1])
        return json.dumps(data, default=str)


class RoundLogger(logging.LoggerAdapter):
    """Stamps run id, phase and round on every record; call-site extras win."""

    def process(self, msg, kwargs):
        kwargs["extra"] = {**self.extra, **(kwargs.get("extra") or {})}
        return msg, kwargs


def round_logger(
    logger: logging.Logger,
    run_id: str = "",
    phase: Optional[int] = None,
    round_index: Optional[int] = None,
) -> RoundLogger:
    return RoundLogger(logger, {"run_id": run_id or None, "phase": phase, "round": round_index})


_console: Optional[logging.Handler] = None
_file: Optional[logging.FileHandler] = None


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    """
    Configure the selffed logging system.

    The console handler is installed once; later calls update the level.
    The JSON lines handler follows the latest `log_file`, so runs of a
    sweep that name their own files each get their own log. Passing no
    file leaves an installed file handler in place.
    """
    global _console, _file

    root = logging.getLogger("selffed")
    root.setLevel(getattr(logging, level.upper(), logging.INFO))

    if _console is None:
        _console = logging.StreamHandler(sys.stderr)
        _console.setFormatter(HumanFormatter())
        root.addHandler(_console)

    if log_file is None:
        return
    path = os.path.abspath(log_file)
    if _file is not None and _file.baseFilename == path:
        return
    if _file is not None:
        root.removeHandler(_file)
        _file.close()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _file = logging.FileHandler(path, encoding="utf-8")
    _file.setFormatter(JsonFormatter())
    root.addHandler(_file)


def get_logger(name: str) -> logging.Logger:
    """Get a logger under the selffed namespace."""
    if not name.startswith("selffed"):
        name = f"selffed.{name}"
    return logging.getLogger(name)
