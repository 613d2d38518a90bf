"""Canonical JSON encoding and content digests.

Canonical form: sorted keys, no insignificant whitespace, floats written with
12 significant digits, non-finite floats as ``null``.  Semantically equal
documents therefore serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np

FLOAT_FORMAT = ".12g"


def _normalize(obj: Any) -> Any:
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _Float(float(obj))
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_normalize(v) for v in obj.tolist()]
    return obj


class _Float(float):
    pass


def _encode(obj: Any) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, _Float):
        if not math.isfinite(obj):
            return "null"
        text = format(float(obj), FLOAT_FORMAT)
        if text == "-0":
            text = "0"
        return text
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, list):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ",".join(json.dumps(k, ensure_ascii=False) + ":" + _encode(v) for k, v in items) + "}"
    raise TypeError(f"cannot canonically encode {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Serialize ``obj`` to canonical JSON text."""
    return _encode(_normalize(obj))


def dump_bytes(obj: Any) -> bytes:
    return dumps(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(obj: Any) -> str:
    """SHA-256 hex digest of the canonical encoding of ``obj``."""
    return sha256_hex(dump_bytes(obj))
