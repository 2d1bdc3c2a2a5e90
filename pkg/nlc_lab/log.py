"""
Logging setup. Modules get their logger with `logging.getLogger(__name__)`, this module only
decides where it goes and how loud it is, driven by the `NLC_LOG` environment variable.
"""

import logging
import os
import sys

from nlc_lab.errors import ConfigInvalid

LOG_ENV_VAR = "NLC_LOG"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

LEVELS = {
    "quiet": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

DEFAULT_LEVEL_NAME = "info"


def level_name_from_env() -> str:
    """
    Read `NLC_LOG`, falling back to `info`.
    :return: One of the keys of `LEVELS`.
    """
    name = os.environ.get(LOG_ENV_VAR, DEFAULT_LEVEL_NAME).strip().lower()
    if name not in LEVELS:
        raise ConfigInvalid(f"{LOG_ENV_VAR} must be one of {sorted(LEVELS)}, got {name!r}")
    return name


def configure_logging(level_name: str) -> None:
    """
    Point the package logger at stderr with the given verbosity.
    Safe to call more than once, the handler is replaced rather than stacked.
    :param level_name: `quiet`, `info` or `debug`.
    :return: None
    """
    if level_name not in LEVELS:
        raise ConfigInvalid(f"unknown log level {level_name!r}")

    package_logger = logging.getLogger("nlc_lab")
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger.addHandler(handler)
    package_logger.setLevel(LEVELS[level_name])
    package_logger.propagate = False


def progress_disabled() -> bool:
    """
    tqdm bars are hidden when the package logger is quieter than INFO.
    :return: True if progress bars should be disabled.
    """
    return not logging.getLogger("nlc_lab").isEnabledFor(logging.INFO)
