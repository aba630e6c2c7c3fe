import logging
import sys
from pathlib import Path

CONSOLE_FORMAT = "%(asctime)s | %(levelname)s | %(name)s: %(message)s"
FILE_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(funcName)s:%(lineno)d - %(message)s"


def setup_logger(log_dir: str | Path = "logs", level: int = logging.INFO) -> logging.Logger:
    # Create logs directory if it doesn't exist
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger()
    logger.setLevel(logging.DEBUG)

    # Repeated CLI invocations in one process (tests) must not stack handlers
    for handler in list(logger.handlers):
        if getattr(handler, "_diffaudit", False):
            logger.removeHandler(handler)
            handler.close()

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    console_handler._diffaudit = True
    logger.addHandler(console_handler)

    # File handler
    file_handler = logging.FileHandler(log_dir / "diffaudit.log")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    file_handler._diffaudit = True
    logger.addHandler(file_handler)

    return logger
