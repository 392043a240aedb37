"""
Process-wide singletons: logging setup shared by every command.
"""

import logging
from pathlib import Path
from typing import Optional

CONSOLE_FORMAT = "%(levelname)s %(name)s: %(message)s"
FILE_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_FILE_NAME = "apcsim.log"

_configured = False


def configure_logging(level: str = "INFO", log_dir: Optional[Path] = None) -> None:
    """
    Configure the root `apcsim` logger once per process.

    The console handler carries no timestamps; the optional file handler in
    `log_dir` does, so timestamps never end up in CSV or JSON outputs.
    """
    global _configured
    logger = logging.getLogger("apcsim")
    logger.setLevel(level.upper() if isinstance(level, str) else level)
    if _configured:
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    logger.addHandler(console)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_dir / LOG_FILE_NAME)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        logger.addHandler(file_handler)

    logger.propagate = False
    _configured = True
