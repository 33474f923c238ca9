"""Canonical JSON: sorted keys, compact separators, UTF-8, finite numbers only."""

from __future__ import annotations

import json
import math
from typing import Any

from .errors import MalformedDocument, UnencodableValue


def _check(value: Any, path: str) -> Any:
    if value is None or isinstance(value, (bool, str)):
        if isinstance(value, str):
            try:
                value.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise UnencodableValue(f"invalid UTF-8 at {path}") from exc
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise UnencodableValue(f"non-finite number at {path}")
        return value
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise UnencodableValue(f"non-string key {k!r} at {path}")
            out[k] = _check(v, f"{path}.{k}")
        return out
    if isinstance(value, (list, tuple)):
        return [_check(v, f"{path}[{i}]") for i, v in enumerate(value)]
    raise UnencodableValue(f"unsupported type {type(value).__name__} at {path}")


def canonical_bytes(obj: Any) -> bytes:
    """Serialize ``obj`` deterministically. Equal documents give equal bytes."""
    checked = _check(obj, "$")
    text = json.dumps(checked, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8")


def _reject_duplicates(pairs):
    doc = {}
    for k, v in pairs:
        if k in doc:
            raise MalformedDocument(f"duplicate key {k!r}")
        doc[k] = v
    return doc


def _reject_constant(name):
    raise MalformedDocument(f"non-finite number {name}")


def parse_document(raw: bytes | str) -> Any:
    """Parse a JSON document strictly (no duplicate keys, no NaN/Infinity)."""
    if isinstance(raw, (bytes, bytearray, memoryview)):
        try:
            raw = bytes(raw).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument("document is not valid UTF-8") from exc
    if not raw.strip():
        raise MalformedDocument("empty document")
    try:
        return json.loads(raw, object_pairs_hook=_reject_duplicates, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc.msg} at {exc.pos}") from exc
