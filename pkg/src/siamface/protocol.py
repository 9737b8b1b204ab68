"""Newline-delimited JSON messages exchanged between camera clients and the server.

Requests::

    {"type": "register", "user_id": int, "image": base64 PGM}
    {"type": "recognize", "request_id": str, "frames": [base64 PGM, ...]}
    {"type": "ping"}

Responses::

    {"type": "registered", "user_id": int, "vector": [5 floats]}
    {"type": "result", "request_id": str, "face_uid": str?, "matches":
        [{"user_id": int, "distance": float}, ...], "empty_store": true?}
    {"type": "pong"}
    {"type": "error", "message": str}
"""

import base64
import binascii
import json
import math
from dataclasses import dataclass, field

from .errors import MalformedRequest
from .store import Match


@dataclass
class Ping:
    pass


@dataclass
class Pong:
    pass


@dataclass
class RegisterRequest:
    user_id: int
    image: bytes


@dataclass
class RecognizeRequest:
    request_id: str
    frames: list


@dataclass
class Registered:
    user_id: int
    vector: list


@dataclass
class MatchResult:
    request_id: str
    matches: list = field(default_factory=list)
    face_uid: str = None
    empty_store: bool = False


@dataclass
class ErrorReply:
    message: str


def _b64(data):
    return base64.b64encode(data).decode("ascii")


def to_dict(msg):
    if isinstance(msg, Ping):
        return {"type": "ping"}
    if isinstance(msg, Pong):
        return {"type": "pong"}
    if isinstance(msg, RegisterRequest):
        return {"type": "register", "user_id": msg.user_id, "image": _b64(msg.image)}
    if isinstance(msg, RecognizeRequest):
        return {"type": "recognize", "request_id": msg.request_id,
                "frames": [_b64(f) for f in msg.frames]}
    if isinstance(msg, Registered):
        return {"type": "registered", "user_id": msg.user_id,
                "vector": [float(v) for v in msg.vector]}
    if isinstance(msg, MatchResult):
        out = {"type": "result", "request_id": msg.request_id}
        if msg.face_uid is not None:
            out["face_uid"] = msg.face_uid
        out["matches"] = [{"user_id": m.user_id, "distance": float(m.distance)}
                          for m in msg.matches]
        if msg.empty_store:
            out["empty_store"] = True
        return out
    if isinstance(msg, ErrorReply):
        return {"type": "error", "message": msg.message}
    raise TypeError(f"not a protocol message: {msg!r}")


def encode(msg):
    """Serialise one message as a UTF-8 JSON line (trailing newline included)."""
    return (json.dumps(to_dict(msg), separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def _field(obj, name, kind):
    if name not in obj:
        raise MalformedRequest(f"missing field {name!r}", name)
    value = obj[name]
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "str": isinstance(value, str),
        "list": isinstance(value, list),
        "number": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
    }[kind]
    if not ok:
        raise MalformedRequest(f"field {name!r} must be of type {kind}", name)
    return value


def _unb64(text, name):
    if not isinstance(text, str):
        raise MalformedRequest(f"field {name!r} must be a base64 string", name)
    try:
        data = base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError):
        raise MalformedRequest(f"field {name!r} is not valid base64", name) from None
    if not data:
        raise MalformedRequest(f"field {name!r} is empty", name)
    return data


def _distance(value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
        raise MalformedRequest("match distance must be a finite non-negative number", "distance")
    return float(value)


def from_dict(obj):
    if not isinstance(obj, dict):
        raise MalformedRequest("message must be a JSON object", "type")
    kind = _field(obj, "type", "str")
    if kind == "ping":
        return Ping()
    if kind == "pong":
        return Pong()
    if kind == "register":
        uid = _field(obj, "user_id", "int")
        if uid < 0:
            raise MalformedRequest("field 'user_id' must be non-negative", "user_id")
        return RegisterRequest(uid, _unb64(_field(obj, "image", "str"), "image"))
    if kind == "recognize":
        rid = _field(obj, "request_id", "str")
        if not rid:
            raise MalformedRequest("field 'request_id' is empty", "request_id")
        frames = _field(obj, "frames", "list")
        if not frames:
            raise MalformedRequest("field 'frames' must hold at least one frame", "frames")
        return RecognizeRequest(rid, [_unb64(f, "frames") for f in frames])
    if kind == "registered":
        vec = _field(obj, "vector", "list")
        if len(vec) != 5 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
            raise MalformedRequest("field 'vector' must hold 5 numbers", "vector")
        return Registered(_field(obj, "user_id", "int"), [float(v) for v in vec])
    if kind == "result":
        rid = _field(obj, "request_id", "str")
        matches = []
        for m in _field(obj, "matches", "list"):
            if not isinstance(m, dict):
                raise MalformedRequest("each match must be an object", "matches")
            matches.append(Match(_field(m, "user_id", "int"), _distance(_field(m, "distance", "number"))))
        face_uid = _field(obj, "face_uid", "str") if "face_uid" in obj else None
        empty = _field(obj, "empty_store", "bool") if "empty_store" in obj else False
        return MatchResult(rid, matches, face_uid, empty)
    if kind == "error":
        return ErrorReply(_field(obj, "message", "str"))
    raise MalformedRequest(f"unknown message type {kind!r}", "type")


def decode(line):
    """Parse one JSON line into a message object."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedRequest("message is not valid UTF-8", "type") from None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRequest(f"invalid JSON: {exc.msg}", "type") from None
    return from_dict(obj)
