"""Utility functions and helpers."""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Optional, Union

import numpy as np

logger = logging.getLogger(__name__)


def setup_logging(log_level: str, log_file: Optional[str] = None, log_format: Optional[str] = None):
    """
    Set up logging configuration.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional log file path
        log_format: Optional log format string
    """
    level = getattr(logging, log_level.upper(), logging.INFO)

    handlers = [logging.StreamHandler()]
    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=level,
        format=log_format or '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )

    logger.debug(f"Logging initialized at {log_level} level")


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def canonical_json(data) -> str:
    """Deterministic JSON text (sorted keys, inf/nan kept as JSON extensions)."""
    return json.dumps(data, sort_keys=True, indent=2, default=_json_default)


def content_hash(*chunks: Union[bytes, str, np.ndarray]) -> str:
    """
    Git-style content hash of a sequence of blobs.

    Each chunk is hashed as a blob object ("blob <len>\\0<bytes>"); the
    digest of the concatenated blob ids identifies the whole input set.
    """
    outer = hashlib.sha1()
    for chunk in chunks:
        if isinstance(chunk, np.ndarray):
            data = np.ascontiguousarray(chunk).tobytes()
        elif isinstance(chunk, str):
            data = chunk.encode('utf-8')
        else:
            data = bytes(chunk)
        blob = hashlib.sha1(b'blob ' + str(len(data)).encode() + b'\0' + data)
        outer.update(blob.digest())
    return outer.hexdigest()


def write_json(path: Union[str, Path], data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(data) + '\n', encoding='utf-8')
    logger.info(f"Wrote {path}")
    return path


def read_json(path: Union[str, Path]):
    return json.loads(Path(path).read_text(encoding='utf-8'))
