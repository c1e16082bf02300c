"""JSON wire format shared by the dispatcher and the workers.

Request::

    {"run_id":<int>,"inputs":{"<name>":<number>,...}}

Response::

    {"run_id":<int>,"outputs":{"<name>":<number>,...},"sim_time_ms":<number>}

Both are compact UTF-8 JSON with keys in the order shown and numbers
written as Python floats (``repr``), so serialization is byte-stable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Mapping

from .campaign import Sample

CONTENT_TYPE = "application/json"


class ProtocolError(ValueError):
    """Payload does not conform to the wire schema."""


class RunIdMismatch(ProtocolError):
    pass


@dataclass(frozen=True)
class Response:
    run_id: int
    outputs: dict[str, float]
    sim_time_ms: float


def _dumps(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False, ensure_ascii=False).encode("utf-8")


def _numbers(obj: Any, what: str) -> dict[str, float]:
    if not isinstance(obj, dict):
        raise ProtocolError(f"{what} must be an object")
    out = {}
    for k, v in obj.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolError(f"{what}[{k!r}] must be a number")
        v = float(v)
        if not math.isfinite(v):
            raise ProtocolError(f"{what}[{k!r}] is not finite")
        out[k] = v
    return out


def _run_id(obj: Mapping) -> int:
    rid = obj.get("run_id")
    if isinstance(rid, bool) or not isinstance(rid, int) or rid < 0:
        raise ProtocolError("run_id must be a non-negative integer")
    return rid


def _load(payload: bytes | str) -> dict:
    try:
        obj = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("payload must be a JSON object")
    return obj


def serialize_request(sample: Sample) -> bytes:
    return _dumps({"run_id": int(sample.run_id), "inputs": {k: float(v) for k, v in sample.inputs.items()}})


def parse_request(payload: bytes | str) -> Sample:
    obj = _load(payload)
    if set(obj) != {"run_id", "inputs"}:
        raise ProtocolError(f"request keys must be run_id and inputs, got {sorted(obj)}")
    return Sample(_run_id(obj), _numbers(obj["inputs"], "inputs"))


def serialize_response(run_id: int, outputs: Mapping[str, float], sim_time_ms: float) -> bytes:
    return _dumps(
        {
            "run_id": int(run_id),
            "outputs": {k: float(v) for k, v in outputs.items()},
            "sim_time_ms": float(sim_time_ms),
        }
    )


def parse_response(payload: bytes | str, expected_run_id: int | None = None) -> Response:
    obj = _load(payload)
    if set(obj) != {"run_id", "outputs", "sim_time_ms"}:
        raise ProtocolError(f"response keys must be run_id, outputs and sim_time_ms, got {sorted(obj)}")
    rid = _run_id(obj)
    if expected_run_id is not None and rid != expected_run_id:
        raise RunIdMismatch(f"response run_id {rid} does not match request run_id {expected_run_id}")
    sim = obj["sim_time_ms"]
    if isinstance(sim, bool) or not isinstance(sim, (int, float)) or not sim >= 0:
        raise ProtocolError("sim_time_ms must be a non-negative number")
    return Response(rid, _numbers(obj["outputs"], "outputs"), float(sim))


def error_body(reason: str) -> bytes:
    return _dumps({"error": reason})
