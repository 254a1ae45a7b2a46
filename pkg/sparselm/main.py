import logging
import os
import sys
from typing import List, Optional

from colorlog import ColoredFormatter
from dotenv import load_dotenv


class WorkerTagFormatter(ColoredFormatter):
    """Colored formatter; records from sweep worker processes carry the worker name."""

    def format(self, record):
        if record.processName != "MainProcess" and not getattr(record, "_worker_tagged", False):
            record.name = f"{record.name}@{record.processName}"
            record._worker_tagged = True
        return super().format(record)


def configure_logging(level: Optional[str] = None) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        WorkerTagFormatter(
            "%(log_color)s%(levelname)s%(reset)s:     %(name)s:%(message_log_color)s%(message)s%(reset)s",
            log_colors={
                "DEBUG": "cyan",
                "INFO": "blue",
                "WARNING": "yellow",
                "ERROR": "red",
                "CRITICAL": "bold_red",
            },
            secondary_log_colors={"message": {"INFO": "bold_blue"}},
        )
    )
    root_logger = logging.getLogger()
    root_logger.handlers = []
    root_logger.addHandler(handler)
    root_logger.setLevel((level or os.getenv("SPARSELM_LOG_LEVEL", "INFO")).upper())


def main(argv: Optional[List[str]] = None) -> int:
    # environment first: the log level and output dir come from it
    load_dotenv()
    configure_logging()

    from sparselm.api.cli import run

    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
