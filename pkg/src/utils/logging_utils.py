"""
Logging utilities for the STL mining pipeline and its command-line tools.
"""
import logging
import os

# Configure standard logging format
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# Initialize root logger - only log to stderr
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format=LOG_FORMAT,
    handlers=[
        logging.StreamHandler()
    ]
)

_registered_loggers = set()


def get_logger(name):
    """
    Get a logger with the specified name and consistent formatting.

    Args:
        name: The name of the logger, typically the component name

    Returns:
        A configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, LOG_LEVEL, logging.INFO))
    _registered_loggers.add(name)
    return logger


def set_log_level(level):
    """
    Change the level of every logger handed out by get_logger.

    Args:
        level: A logging level name ("DEBUG", "INFO", ...) or number
    """
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    logging.getLogger().setLevel(level)
    for name in _registered_loggers:
        logging.getLogger(name).setLevel(level)


def progress_enabled(logger):
    """Progress bars are shown only when the logger would print INFO lines."""
    return logger.isEnabledFor(logging.INFO)


def _extra(kwargs):
    return ", ".join(f"{k}={v}" for k, v in kwargs.items() if v is not None)


def log_stage_start(logger, stage, content=None, **kwargs):
    """
    Log the start of a pipeline stage with consistent format.

    Args:
        logger: The logger instance
        stage: Stage name (e.g., 'Build DB', 'Mining')
        content: Optional free-text description
        **kwargs: Additional fields to log
    """
    logger.info(f"START {stage}: {content or ''} {_extra(kwargs)}".rstrip())


def log_stage_end(logger, stage, elapsed, content=None, **kwargs):
    """
    Log the completion of a pipeline stage together with its elapsed time.

    Args:
        logger: The logger instance
        stage: Stage name
        elapsed: Seconds spent in the stage
        content: Optional free-text description
        **kwargs: Additional fields to log
    """
    logger.info(
        f"DONE {stage}: {content or ''} {_extra(kwargs)} in {elapsed:.2f}s".replace("  ", " ")
    )
