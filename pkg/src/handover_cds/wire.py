"""Newline-delimited JSON messages shared by the TCP and WebSocket feeds.

Every message is a single UTF-8 line; numbers are written with 9
significant digits; unknown fields are ignored, unknown types rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

from . import jsonio
from .errors import ProtocolError

WIRE_SIG_DIGITS = 9


@dataclass(frozen=True)
class LeaderSample:
    """Inbound observed leader wrist position."""

    t: float
    y: float
    z: float


@dataclass(frozen=True)
class FollowerCommand:
    """Outbound follower wrist command plus intent/target telemetry."""

    t: float
    y: float
    z: float
    vy: float
    vz: float
    intent: str              # "handover" | "other"
    target_y: float
    target_z: float
    stale: bool = False


@dataclass(frozen=True)
class Hello:
    model_version: str


@dataclass(frozen=True)
class Reset:
    pass


@dataclass(frozen=True)
class ErrorReply:
    message: str


WireMessage = Union[LeaderSample, FollowerCommand, Hello, Reset, ErrorReply]


def _require_number(payload: dict, key: str) -> float:
    try:
        value = payload[key]
    except KeyError:
        raise ProtocolError(f"missing field {key!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProtocolError(f"field {key!r} is not a number")
    value = float(value)
    if not math.isfinite(value):
        raise ProtocolError(f"field {key!r} is not finite")
    return value


def decode_message(line: Union[str, bytes]) -> WireMessage:
    """Parse one wire line; raises ProtocolError with the byte offset."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("not valid UTF-8", offset=exc.start) from exc
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"bad JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(payload, dict):
        raise ProtocolError("message must be a JSON object")
    msg_type = payload.get("type")
    if msg_type == "leader":
        return LeaderSample(
            t=_require_number(payload, "t"),
            y=_require_number(payload, "y"),
            z=_require_number(payload, "z"),
        )
    if msg_type == "follower":
        return FollowerCommand(
            t=_require_number(payload, "t"),
            y=_require_number(payload, "y"),
            z=_require_number(payload, "z"),
            vy=_require_number(payload, "vy"),
            vz=_require_number(payload, "vz"),
            intent=str(payload.get("intent", "other")),
            target_y=_require_number(payload, "target_y"),
            target_z=_require_number(payload, "target_z"),
            stale=bool(payload.get("stale", False)),
        )
    if msg_type == "hello":
        version = payload.get("model_version")
        if not isinstance(version, str):
            raise ProtocolError("hello needs a model_version string")
        return Hello(model_version=version)
    if msg_type == "reset":
        return Reset()
    if msg_type == "error":
        return ErrorReply(message=str(payload.get("message", "")))
    raise ProtocolError(f"unknown message type {msg_type!r}")


def encode_message(msg: WireMessage) -> str:
    """Render a message as one newline-terminated JSON line."""
    if isinstance(msg, LeaderSample):
        doc = {"type": "leader", "t": msg.t, "y": msg.y, "z": msg.z}
    elif isinstance(msg, FollowerCommand):
        doc = {
            "type": "follower",
            "t": msg.t,
            "y": msg.y,
            "z": msg.z,
            "vy": msg.vy,
            "vz": msg.vz,
            "intent": msg.intent,
            "target_y": msg.target_y,
            "target_z": msg.target_z,
            "stale": msg.stale,
        }
    elif isinstance(msg, Hello):
        doc = {"type": "hello", "model_version": msg.model_version}
    elif isinstance(msg, Reset):
        doc = {"type": "reset"}
    elif isinstance(msg, ErrorReply):
        doc = {"type": "error", "message": msg.message}
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return jsonio.render(doc, WIRE_SIG_DIGITS) + "\n"
