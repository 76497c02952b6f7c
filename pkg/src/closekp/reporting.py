"""Shared helpers for machine-readable reports."""
from __future__ import annotations

import csv
import io
import json
import math
from datetime import datetime, timezone

SCHEMA_VERSION = "1.0"


def _clean(obj):
    # JSON has no NaN/inf; reports use null instead.
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _clean(obj.item())
    return obj


def envelope(kind: str, payload: dict, deterministic: bool = False) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind}
    if not deterministic:
        doc["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    doc.update(payload)
    return doc


def dumps_json(doc) -> str:
    return json.dumps(_clean(doc), indent=2, allow_nan=False) + "\n"


def dumps_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n",
                            extrasaction="raise")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    return value
