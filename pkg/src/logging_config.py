"""
This module provides a function to set up the package logger with both file and stream
handlers. Logs go to a rotating UTF-8 file and to the console.
"""

import logging
import os
from logging import Logger
from logging.handlers import RotatingFileHandler
from typing import Optional, Union

LOGGER_NAME: str = "Wombet"


def setup_logger(log_dir: str = "logs", level: Optional[Union[str, int]] = None) -> Logger:
    """
    Set up the "Wombet" logger with file and stream handlers.

    Handlers are installed only once per process; later calls only adjust the level.

    Args:
        log_dir (str, optional): Directory of the rotating log file. Defaults to "logs".
        level (Optional[Union[str, int]], optional): Logger level; WOMBET_LOG_LEVEL wins
            when set. Defaults to DEBUG.

    Returns:
        Logger: Configured logger instance.
    """
    try:
        logger: Logger = logging.getLogger(LOGGER_NAME)

        # Prevent adding multiple handlers if the logger already has handlers
        if not logger.handlers:
            try:
                if not os.path.exists(log_dir):
                    os.makedirs(log_dir)
                    logger.debug("Created logs directory at %s", log_dir)
            except OSError as e:
                logger.critical("Failed to create logs directory '%s': %s", log_dir, e)
                raise

            try:
                _log_file_path: str = os.path.join(log_dir, "wombet.log")
                _file_handler: RotatingFileHandler = RotatingFileHandler(
                    _log_file_path,
                    maxBytes=10 * 1024 * 1024,  # 10 MB
                    backupCount=10,
                    encoding="utf-8",
                )
                _file_handler.setFormatter(
                    logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
                )
                _file_handler.setLevel(logging.DEBUG)
                logger.addHandler(_file_handler)
                logger.debug("File handler added with path %s", _log_file_path)
            except (OSError, IOError) as e:
                logger.error("Failed to set up file handler: %s", e)

            _stream_handler: logging.StreamHandler = logging.StreamHandler()
            _stream_handler.setFormatter(logging.Formatter("%(levelname)s - %(message)s"))
            _stream_handler.setLevel(logging.INFO)
            logger.addHandler(_stream_handler)

        chosen: Union[str, int] = os.getenv("WOMBET_LOG_LEVEL") or level or logging.DEBUG
        logger.setLevel(chosen.upper() if isinstance(chosen, str) else chosen)
        return logger

    except Exception as e:  # pylint: disable=broad-exception-caught
        logging.critical("Failed to set up logger: %s", e)
        raise
