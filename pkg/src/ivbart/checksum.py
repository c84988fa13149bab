"""Hashing of configurations and data stamped on every artifact.
"""

import json
import hashlib
from enum import Enum
from dataclasses import asdict, is_dataclass

import numpy as np


def _plain(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _plain(asdict(obj))
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj) -> str:
    """JSON text with sorted keys and no whitespace; dataclasses and enums flattened."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def calculate(obj) -> str:
    """Calculate the SHA-256 hex digest of a configuration.

    Arguments:
        obj -- JSON-serializable configuration, dataclasses and enums allowed

    Returns:
        64 character hex digest
    """
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def calculate_arrays(*arrays: np.ndarray) -> str:
    """SHA-256 over the shapes and little-endian float64 bytes of the arrays."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array, dtype="<f8")
        digest.update(repr(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()
