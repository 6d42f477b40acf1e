"""Defaults and configuration-document helpers.

Environment overrides are read from ``.env`` (python-dotenv) before the
module-level defaults are computed.
"""
import json
import os
from typing import Any, Dict, Iterable

from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()

# Verification
DEFAULT_ETA = float(os.getenv("BBW_ETA", "0.7"))
ETA_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)

# Trigger cluster search
DEFAULT_MIN_PTS = 5
DEFAULT_TOLERANCE = 5
DEFAULT_STEP = 0.005
DEFAULT_MAX_ITERATIONS = 2000

# Poisoning magnitudes evaluated in the sweeps
MAGNITUDE_GRID = (0.8, 0.9, 0.95, 1.05, 1.1, 1.2)

# Proxy / service
HOST = os.getenv("BBW_HOST", "127.0.0.1")
PORT = int(os.getenv("BBW_PORT", "8000"))
LOG_LEVEL = os.getenv("BBW_LOG_LEVEL", "INFO").upper()
WORKERS = int(os.getenv("BBW_WORKERS", "1"))


def load_document(path: str) -> Dict[str, Any]:
    """Read a JSON config document."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found", path=path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})", path=path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object", path=path)
    return doc


def check_keys(doc: Dict[str, Any], allowed: Iterable[str], where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}", keys=unknown)


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)
