# services/log_setup.py
import logging
import os
import re
from logging.handlers import RotatingFileHandler

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'

_SIZE_UNITS = {'': 1, 'B': 1, 'KB': 1024, 'MB': 1024 ** 2, 'GB': 1024 ** 3}


def parse_size(value) -> int:
    """Parse sizes such as '10MB' into bytes"""
    if isinstance(value, (int, float)):
        return int(value)
    match = re.fullmatch(r'\s*(\d+(?:\.\d+)?)\s*([KMG]?B?)\s*', str(value).upper())
    if not match:
        raise ValueError(f"Invalid size: {value}")
    return int(float(match.group(1)) * _SIZE_UNITS[match.group(2)])


def setup_logger(config_manager=None, level=None, log_file=None):
    """Setup rotating-file and console logging for DuetGen"""
    logging_config = config_manager.get_logging_config() if config_manager else {}
    level = level or logging_config.get('level', 'INFO')
    log_file = log_file if log_file is not None else logging_config.get('file', 'logs/duetgen.log')

    formatter = logging.Formatter(LOG_FORMAT)
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))

    # Re-running setup (tests, repeated CLI calls) must not stack handlers
    for handler in list(logger.handlers):
        if getattr(handler, '_duetgen', False):
            logger.removeHandler(handler)
            handler.close()

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=parse_size(logging_config.get('max_size', '10MB')),
            backupCount=int(logging_config.get('backup_count', 5))
        )
        file_handler.setFormatter(formatter)
        file_handler._duetgen = True
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler._duetgen = True
    logger.addHandler(console_handler)

    return logger
