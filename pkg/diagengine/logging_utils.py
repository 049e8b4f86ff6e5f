"""Logger factory shared by every module."""

import logging

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logger(name, level=None):
    """Return a module logger; handlers are attached once to the package root."""
    root = logging.getLogger("diagengine")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        root.setLevel(logging.INFO)
    logger = logging.getLogger(name)
    if level is not None:
        logger.setLevel(level)
    return logger


def set_log_level(level):
    """Set the package-wide level, e.g. from the --log-level flag."""
    if isinstance(level, str):
        level = getattr(logging, level.upper())
    logging.getLogger("diagengine").setLevel(level)
