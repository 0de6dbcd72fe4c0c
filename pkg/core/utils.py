"""
Utility functions for myotrack
"""
import functools
import os
import tempfile
import time
from pathlib import Path
from typing import Union

from loguru import logger


def atomic_write(path: Union[str, Path], data: Union[bytes, str]) -> Path:
    """
    Write a file by writing a sibling temp file and renaming it over the target.

    Readers never see a half-written file, and a failed write leaves the old
    file (if any) untouched.

    Args:
        path: Destination file; parent directories are created
        data: Bytes, or text which is encoded as UTF-8

    Returns:
        The destination path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def log_duration(label: str):
    """
    Decorator that logs how long the wrapped call took.

    Example:
        @log_duration("register")
        def cmd_register(args):
            ...
    """
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                logger.info(f"{label} finished in {time.perf_counter() - start:.2f}s")

        return wrapper
    return decorator
