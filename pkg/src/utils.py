"""
Utility functions for the SLAM backend.

This module provides helper functions for validation, logging configuration,
environment loading, report formatting and file hashing.
"""

import hashlib
import logging
import math
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Iterable, Optional, Tuple

from dotenv import load_dotenv

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .exceptions import ValidationException
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from exceptions import ValidationException


LOGGER_NAME = "casual_slam"
DEFAULT_LOG_FILE = "slam.log"


def setup_logging(log_file: str = DEFAULT_LOG_FILE, max_bytes: int = 10485760,
                  backup_count: int = 5, level: int = logging.INFO) -> logging.Logger:
    """
    Set up logging configuration with both file and console handlers.

    Args:
        log_file: Name of the log file
        max_bytes: Maximum file size before rotation (default 10MB)
        backup_count: Number of backup files to keep
        level: Logging level for both handlers

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)

    # Clear existing handlers to avoid duplicates
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

    formatter = logging.Formatter(
        '[%(asctime)s] [%(levelname)s] %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    file_handler = RotatingFileHandler(
        log_file,
        maxBytes=max_bytes,
        backupCount=backup_count
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(formatter)

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)

    return logger


def load_environment() -> Dict[str, Any]:
    """
    Load process settings from the environment and an optional .env file.

    Returns:
        Dictionary with 'log_file', 'log_level' and 'default_seed'

    Raises:
        ValidationException: If a variable is set to an unusable value
    """
    load_dotenv()

    log_file = os.getenv('SLAM_LOG_FILE', DEFAULT_LOG_FILE).strip() or DEFAULT_LOG_FILE

    level_name = os.getenv('SLAM_LOG_LEVEL', 'INFO').strip().upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise ValidationException(f"Invalid SLAM_LOG_LEVEL: {level_name}")

    seed_text = os.getenv('SLAM_DEFAULT_SEED', '0').strip() or '0'
    default_seed = validate_non_negative_int(seed_text, 'SLAM_DEFAULT_SEED')

    return {
        'log_file': log_file,
        'log_level': level,
        'default_seed': default_seed,
    }


def validate_positive_float(value: Any, name: str, allow_zero: bool = False) -> float:
    """
    Validate a strictly positive (or non-negative) finite number.

    Args:
        value: Number or its text form
        name: Parameter name used in the error message
        allow_zero: Accept 0 as well

    Returns:
        Validated value as float

    Raises:
        ValidationException: If the value is not a finite number in range
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ValidationException(f"Invalid {name}: {value}. Must be a valid number")

    if not math.isfinite(number):
        raise ValidationException(f"{name} must be finite: {value}")

    if allow_zero:
        if number < 0:
            raise ValidationException(f"{name} must be non-negative: {number}")
    elif number <= 0:
        raise ValidationException(f"{name} must be positive: {number}")

    return number


def validate_non_negative_int(value: Any, name: str, minimum: int = 0) -> int:
    """
    Validate an integer not smaller than ``minimum``.

    Raises:
        ValidationException: If the value is not an integer in range
    """
    if isinstance(value, bool):
        raise ValidationException(f"Invalid {name}: {value}. Must be an integer")
    try:
        if isinstance(value, str):
            number = int(value.strip())
        else:
            number = int(value)
            if number != value:
                raise ValueError(value)
    except (TypeError, ValueError):
        raise ValidationException(f"Invalid {name}: {value}. Must be an integer")

    if number < minimum:
        raise ValidationException(f"{name} must be >= {minimum}: {number}")

    return number


def validate_bool(value: Any, name: str) -> bool:
    """Validate a boolean given as bool or as true/false, yes/no, on/off, 1/0 text."""
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('true', 'yes', 'on', '1'):
        return True
    if text in ('false', 'no', 'off', '0'):
        return False
    raise ValidationException(f"Invalid {name}: {value}. Must be true or false")


def validate_choice(value: Any, name: str, choices: Iterable[str]) -> str:
    """
    Validate a value against a fixed set of lowercase choices.

    Raises:
        ValidationException: If the value is not one of the choices
    """
    choices = tuple(choices)
    text = str(value).strip().lower()
    if text not in choices:
        raise ValidationException(f"Invalid {name}: {value}. Must be one of {', '.join(choices)}")
    return text


def format_float(value: float, digits: int = 9) -> str:
    """Format a float with ``digits`` significant digits; non-finite values become 'nan'/'inf'."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    text = f"{value:.{digits}g}"
    if text == "-0":
        text = "0"
    return text


def format_report(metrics: Dict[str, Any]) -> str:
    """
    Format metrics as machine-parsable ``metric = value`` lines.

    Args:
        metrics: Ordered mapping of metric name to value

    Returns:
        Report text ending with a newline
    """
    lines = []
    for key, value in metrics.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = format_float(value, 12)
        elif isinstance(value, (list, tuple)):
            text = " ".join(str(item) for item in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, str]:
    """Parse ``metric = value`` lines back into a dictionary of strings."""
    metrics = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        if sep:
            metrics[key.strip()] = value.strip()
    return metrics


def sha256_file(path: str, chunk_size: int = 1 << 20) -> str:
    """Return the hex SHA-256 digest of a file."""
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        while True:
            chunk = handle.read(chunk_size)
            if not chunk:
                break
            digest.update(chunk)
    return digest.hexdigest()


def sha256_directory(path: str) -> str:
    """Hash every file under ``path`` in sorted relative-path order."""
    digest = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, path).replace(os.sep, '/')
            digest.update(rel.encode('utf-8'))
            digest.update(sha256_file(full).encode('ascii'))
    return digest.hexdigest()


def format_duration(seconds: float) -> str:
    """Format a wall-clock duration for log messages."""
    if seconds < 60:
        return f"{seconds:.2f}s"
    minutes, rest = divmod(seconds, 60)
    return f"{int(minutes)}m{rest:04.1f}s"


def split_key_value(line: str) -> Optional[Tuple[str, str]]:
    """Split a ``key = value`` line, ignoring ``#`` comments; None for blank lines."""
    content = line.split('#', 1)[0].strip()
    if not content:
        return None
    key, sep, value = content.partition('=')
    if not sep:
        raise ValueError(f"expected 'key = value', got: {content}")
    return key.strip(), value.strip()
