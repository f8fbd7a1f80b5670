"""The cicd/1 wire contract, implemented independently of any engine code.

One JSON object per line; every frame carries ``v: "cicd/1"``. The
handshake's ``vocab_digest`` must equal sha256 over the token table with a
NUL byte after each token, so an engine can cross-check the digest against
the table and refuse mismatched session pairs.
"""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

PROTOCOL_VERSION = "cicd/1"

CLIENT_TYPES = {"hello", "init", "step_request", "feed", "close"}
SERVER_TYPES = {"hello_ack", "init_ack", "logits", "feed_ack", "close", "error"}


class WireError(Exception):
    """Protocol-level failure; ``code`` feeds the error frame."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def vocab_digest(token_table) -> str:
    h = hashlib.sha256()
    for token in token_table:
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def encode_frame(msg_type: str, session: str = "", **payload) -> bytes:
    obj = {"v": PROTOCOL_VERSION, "type": msg_type}
    if session:
        obj["session"] = session
    obj.update(payload)
    return json.dumps(obj, allow_nan=False, separators=(",", ":")).encode() + b"\n"


def decode_frame(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError("parse", f"bad frame: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireError("parse", "frame must be a JSON object")
    if obj.get("v") != PROTOCOL_VERSION:
        raise WireError("version", f"unsupported protocol version {obj.get('v')!r}")
    if obj.get("type") not in CLIENT_TYPES | SERVER_TYPES:
        raise WireError("parse", f"unknown message type {obj.get('type')!r}")
    return obj


def logits_payload(values, use_b64: bool = False) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise WireError("internal", "non-finite logits")
    if use_b64:
        return {"logits_f32_b64": base64.b64encode(arr.astype("<f4").tobytes()).decode()}
    return {"logits": [float(x) for x in arr]}
