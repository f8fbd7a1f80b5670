"""Line-delimited JSON protocol between the decoding engine and backends.

One message per line, UTF-8 JSON, newline-terminated. Every frame carries
the protocol version under ``v``. The same frames work over stdio pipes to
a subprocess or over a local stream socket; the engine serializes its own
writes per connection, and a server answers each request before reading
the next, so a plain request/response loop is sufficient on both ends.

Message types and their payload fields:

==============  =====================================================
hello           (none)
hello_ack       vocab_size, vocab_digest, eos_token, token_table?
init            session, image_id, prompt (token list)
init_ack        session
step_request    session, step
logits          session, step, logits | logits_f32_b64
feed            session, token
feed_ack        session
close           (none) -- server echoes and the connection ends
error           code, message, session?
==============  =====================================================

``logits`` carries the dense vector as a JSON number array by default; the
optional ``logits_f32_b64`` field (base64 little-endian float32) exists for
large vocabularies.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EncodingError,
    ParseError,
    SessionError,
    SessionMismatch,
    UnknownType,
    VersionError,
)

PROTOCOL_VERSION = "cicd/1"

MESSAGE_TYPES = frozenset({
    "hello", "hello_ack", "init", "init_ack", "step_request",
    "logits", "feed", "feed_ack", "close", "error",
})

__all__ = [
    "PROTOCOL_VERSION",
    "MESSAGE_TYPES",
    "WireMessage",
    "SessionState",
    "encode",
    "decode",
    "lockstep_barrier",
    "logits_to_payload",
    "logits_from_payload",
    "vocab_digest",
    "serve_stream",
    "WireBackendClient",
    "WireSession",
]


@dataclass
class WireMessage:
    """A protocol frame: type, optional session id, type-dependent payload."""

    type: str
    session: str = ""
    payload: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.payload.get(key, default)


def vocab_digest(token_table) -> str:
    """Stable digest of a token table; engines refuse pairs that disagree."""
    h = hashlib.sha256()
    for token in token_table:
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def logits_to_payload(values, use_b64: bool = False) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise EncodingError("logits payload contains non-finite values")
    if use_b64:
        return {"logits_f32_b64": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii")}
    return {"logits": [float(x) for x in arr]}


def logits_from_payload(payload: dict) -> np.ndarray:
    if "logits" in payload:
        return np.asarray(payload["logits"], dtype=np.float64)
    if "logits_f32_b64" in payload:
        raw = base64.b64decode(payload["logits_f32_b64"])
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)
    raise ParseError("logits message lacks a logits payload")


def encode(msg: WireMessage, vocab_size: int | None = None) -> bytes:
    """Serialize to a single newline-terminated UTF-8 JSON line.

    When ``vocab_size`` is given, a dense ``logits`` payload of any other
    length is rejected. Non-finite numbers are rejected outright (they are
    not representable in strict JSON).
    """
    if msg.type not in MESSAGE_TYPES:
        raise EncodingError(f"unknown message type {msg.type!r}")
    if msg.type == "logits" and vocab_size is not None:
        dense = msg.payload.get("logits")
        if dense is not None and len(dense) != vocab_size:
            raise EncodingError(
                f"logits length {len(dense)} != negotiated vocab size {vocab_size}")
    obj = {"v": PROTOCOL_VERSION, "type": msg.type}
    if msg.session:
        obj["session"] = msg.session
    obj.update(msg.payload)
    try:
        line = json.dumps(obj, allow_nan=False, separators=(",", ":"))
    except ValueError as exc:
        raise EncodingError(f"message not JSON-serializable: {exc}") from exc
    if "\n" in line:
        raise EncodingError("encoded frame must not contain newlines")
    return line.encode("utf-8") + b"\n"


def decode(line: bytes | str) -> WireMessage:
    """Parse one frame; raises ParseError/VersionError/UnknownType."""
    if isinstance(line, bytes):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"frame is not UTF-8: {exc}", offset=exc.start) from exc
    else:
        text = line
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad JSON frame: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(obj, dict):
        raise ParseError("frame must be a JSON object", offset=0)
    version = obj.pop("v", None)
    if version != PROTOCOL_VERSION:
        raise VersionError(f"unsupported protocol version {version!r}")
    msg_type = obj.pop("type", None)
    if msg_type not in MESSAGE_TYPES:
        raise UnknownType(f"unknown message type {msg_type!r}")
    session = obj.pop("session", "")
    return WireMessage(type=msg_type, session=session, payload=obj)


@dataclass
class SessionState:
    """Mirror of one generation session's shared context."""

    session_id: str
    image_id: str
    fed_tokens: list[int] = field(default_factory=list)
    last_step: int = -1


def lockstep_barrier(a: SessionState, b: SessionState) -> None:
    """Verify the two sessions of a pair share token context and step.

    Raises SessionMismatch naming the first divergent token position.
    """
    if a.fed_tokens != b.fed_tokens:
        upto = min(len(a.fed_tokens), len(b.fed_tokens))
        position = upto
        for i in range(upto):
            if a.fed_tokens[i] != b.fed_tokens[i]:
                position = i
                break
        raise SessionMismatch(
            f"sessions {a.session_id!r}/{b.session_id!r} diverge at token {position}",
            position=position)
    if a.last_step != b.last_step:
        raise SessionMismatch(
            f"sessions at different steps: {a.last_step} vs {b.last_step}")


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------

def _error_frame(code: str, message: str, session: str = "") -> WireMessage:
    return WireMessage(type="error", session=session,
                       payload={"code": code, "message": message})


def serve_stream(model, rfile, wfile, *, logits_b64: bool = False) -> None:
    """Serve one connection: read frames from rfile, answer on wfile.

    ``model`` must provide ``token_table`` (list of token strings),
    ``eos_id`` (int) and ``open_session(image_id, prompt) -> session`` where
    a session has ``step_logits() -> array`` and ``feed(token)``. Malformed
    input produces an error frame and the connection stays alive; a close
    frame is echoed and ends the loop.
    """
    table = list(model.token_table)
    digest = vocab_digest(table)
    vocab_size = len(table)
    sessions: dict[str, object] = {}
    states: dict[str, SessionState] = {}

    def send(msg: WireMessage) -> None:
        wfile.write(encode(msg, vocab_size=vocab_size))
        wfile.flush()

    for raw in rfile:
        if not raw.strip():
            continue
        try:
            msg = decode(raw)
        except VersionError as exc:
            send(_error_frame("version", str(exc)))
            continue
        except ParseError as exc:
            send(_error_frame("parse", str(exc)))
            continue

        if msg.type == "hello":
            payload = {
                "vocab_size": vocab_size,
                "vocab_digest": digest,
                "eos_token": int(model.eos_id),
            }
            if vocab_size <= 65536:
                payload["token_table"] = table
            send(WireMessage(type="hello_ack", payload=payload))
            continue
        if msg.type == "close":
            send(WireMessage(type="close"))
            break

        sid = msg.session
        if msg.type == "init":
            if not sid:
                send(_error_frame("bad_request", "init requires a session id"))
                continue
            if sid in sessions:
                send(_error_frame("bad_request", f"session {sid!r} already initialized", sid))
                continue
            image_id = msg.get("image_id")
            prompt = msg.get("prompt", [])
            try:
                sessions[sid] = model.open_session(image_id, prompt)
            except Exception as exc:
                send(_error_frame("init_failed", str(exc), sid))
                continue
            states[sid] = SessionState(session_id=sid, image_id=image_id,
                                       fed_tokens=list(prompt))
            send(WireMessage(type="init_ack", session=sid))
            continue

        if sid not in sessions:
            send(_error_frame("unknown_session", f"session {sid!r} not initialized", sid))
            continue
        session = sessions[sid]
        state = states[sid]

        if msg.type == "step_request":
            step = msg.get("step")
            if not isinstance(step, int) or step <= state.last_step:
                send(_error_frame(
                    "ordering",
                    f"step {step!r} not increasing (last {state.last_step})", sid))
                continue
            try:
                values = session.step_logits()
            except Exception as exc:
                send(_error_frame("backend", str(exc), sid))
                continue
            state.last_step = step
            payload = {"step": step}
            payload.update(logits_to_payload(values, use_b64=logits_b64))
            send(WireMessage(type="logits", session=sid, payload=payload))
        elif msg.type == "feed":
            token = msg.get("token")
            if not isinstance(token, int) or not 0 <= token < vocab_size:
                send(_error_frame("bad_request", f"bad token {token!r}", sid))
                continue
            try:
                session.feed(token)
            except Exception as exc:
                send(_error_frame("backend", str(exc), sid))
                continue
            state.fed_tokens.append(token)
            send(WireMessage(type="feed_ack", session=sid))
        else:
            send(_error_frame("bad_request", f"unexpected {msg.type!r} from client", sid))


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------

class WireBackendClient:
    """Engine-side endpoint for one connection to a backend process.

    Synchronous request/response: the engine owns the connection and never
    pipelines, so each request reads exactly one reply frame.
    """

    def __init__(self, rfile, wfile):
        self._rfile = rfile
        self._wfile = wfile
        self._session_counter = 0
        self.vocab_size: int | None = None
        self.vocab_digest: str | None = None
        self.eos_id: int | None = None
        self.token_table: list[str] | None = None

    def _request(self, msg: WireMessage, expect: str) -> WireMessage:
        self._wfile.write(encode(msg))
        self._wfile.flush()
        raw = self._rfile.readline()
        if not raw:
            raise SessionError("backend closed the connection")
        reply = decode(raw)
        if reply.type == "error":
            raise SessionError(
                f"backend error [{reply.get('code')}]: {reply.get('message')}")
        if reply.type != expect:
            raise SessionError(f"expected {expect!r} reply, got {reply.type!r}")
        return reply

    def handshake(self) -> None:
        ack = self._request(WireMessage(type="hello"), "hello_ack")
        self.vocab_size = int(ack.get("vocab_size"))
        self.vocab_digest = ack.get("vocab_digest")
        self.eos_id = int(ack.get("eos_token"))
        self.token_table = ack.get("token_table")
        if self.token_table is not None:
            if len(self.token_table) != self.vocab_size:
                raise SessionError("token table length disagrees with vocab_size")
            if vocab_digest(self.token_table) != self.vocab_digest:
                raise SessionError("backend digest does not match its token table")

    def token_text(self, token: int) -> str:
        if self.token_table is not None:
            return self.token_table[token]
        return f"<{token}>"

    def open_session(self, image_id: str, prompt, session_id: str = "") -> "WireSession":
        if self.vocab_size is None:
            raise SessionError("handshake required before opening sessions")
        session_id = session_id or f"s{self._session_counter}"
        self._session_counter += 1
        msg = WireMessage(type="init", session=session_id,
                          payload={"image_id": image_id, "prompt": [int(t) for t in prompt]})
        ack = self._request(msg, "init_ack")
        if ack.session != session_id:
            raise SessionError(f"init_ack for wrong session {ack.session!r}")
        return WireSession(self, session_id, image_id, list(prompt))

    def close(self) -> None:
        try:
            self._wfile.write(encode(WireMessage(type="close")))
            self._wfile.flush()
            self._rfile.readline()
        except (OSError, ValueError):
            pass  # already torn down


class WireSession:
    """One generation session over a WireBackendClient."""

    def __init__(self, client: WireBackendClient, session_id: str, image_id: str, prompt: list):
        self._client = client
        self.state = SessionState(session_id=session_id, image_id=image_id,
                                  fed_tokens=[int(t) for t in prompt])

    @property
    def image_id(self) -> str:
        return self.state.image_id

    def step_logits(self) -> np.ndarray:
        step = self.state.last_step + 1
        msg = WireMessage(type="step_request", session=self.state.session_id,
                          payload={"step": step})
        reply = self._client._request(msg, "logits")
        if reply.session != self.state.session_id or reply.get("step") != step:
            raise SessionError(f"logits reply out of order at step {step}")
        values = logits_from_payload(reply.payload)
        if values.size != self._client.vocab_size:
            raise SessionError(
                f"logits length {values.size} != vocab size {self._client.vocab_size}")
        self.state.last_step = step
        return values

    def feed(self, token: int) -> None:
        msg = WireMessage(type="feed", session=self.state.session_id,
                          payload={"token": int(token)})
        self._client._request(msg, "feed_ack")
        self.state.fed_tokens.append(int(token))
