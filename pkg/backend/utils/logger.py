import logging
import os
from contextlib import contextmanager
from contextvars import ContextVar
from logging.handlers import RotatingFileHandler

from config import Config

_current_run: ContextVar[str] = ContextVar("bbdfml_run", default="-")

LOG_FORMAT = '%(asctime)s - %(name)s - [%(run)s] %(levelname)s - %(message)s'


class RunContextFilter(logging.Filter):
    """Stamp every record with the short hash of the run being driven ('-' outside a run)"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run = _current_run.get()
        return True


@contextmanager
def run_context(run_id: str):
    """Tag log records emitted inside the block with run_id"""
    token = _current_run.set(run_id)
    try:
        yield run_id
    finally:
        _current_run.reset(token)


def setup_logger(name: str, log_file: str | None, level=logging.INFO):
    """Set up logger with a rotating file handler (when log_file is set) and a console handler"""
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Prevent duplicate handlers
    if logger.handlers:
        return logger

    formatter = logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')
    run_filter = RunContextFilter()

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        # 10MB max, keep 5 backups
        file_handler = RotatingFileHandler(log_file, maxBytes=10 * 1024 * 1024, backupCount=5)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        file_handler.addFilter(run_filter)
        logger.addHandler(file_handler)

    # Console only surfaces degradations; per-slot detail stays in the file
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.WARNING)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(run_filter)
    logger.addHandler(console_handler)

    return logger


def set_console_level(level: int):
    """Raise or lower the console verbosity of the application logger (CLI --verbose)"""
    for handler in app_logger.handlers:
        if not isinstance(handler, RotatingFileHandler):
            handler.setLevel(level)


app_logger = setup_logger('bbdfml', Config.LOG_FILE, level=getattr(logging, Config.LOG_LEVEL, logging.INFO))
