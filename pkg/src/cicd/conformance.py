"""Protocol conformance checks runnable against any backend endpoint.

The suite drives a live connection through the full session lifecycle and
the required failure behaviors: handshake, dual-session init, lockstep
step/feed ordering, bit-reproducibility of logits for identical contexts,
error frames for malformed/misordered input with the connection kept
alive, and clean shutdown. The same checks apply to the in-tree synthetic
backend and to any external adapter speaking the wire protocol.
"""

from __future__ import annotations

import json
import subprocess

import numpy as np

from .protocol import PROTOCOL_VERSION, WireMessage, decode, encode, vocab_digest

__all__ = ["ConformanceFailure", "run_conformance", "spawn_stdio_backend"]


class ConformanceFailure(AssertionError):
    """A backend violated the wire contract; the message names the check."""


def spawn_stdio_backend(argv: list[str]) -> tuple:
    """Start a backend subprocess; returns (rfile, wfile, proc)."""
    proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    return proc.stdout, proc.stdin, proc


class _Conn:
    def __init__(self, rfile, wfile):
        self.rfile = rfile
        self.wfile = wfile

    def send_raw(self, data: bytes) -> None:
        self.wfile.write(data)
        self.wfile.flush()

    def send(self, msg: WireMessage) -> None:
        self.send_raw(encode(msg))

    def recv(self) -> WireMessage:
        line = self.rfile.readline()
        if not line:
            raise ConformanceFailure("backend closed the connection mid-suite")
        return decode(line)


def _expect(cond: bool, check: str) -> None:
    if not cond:
        raise ConformanceFailure(f"conformance check failed: {check}")


def run_conformance(rfile, wfile, image_a: str, image_b: str,
                    prompt: list[int] | None = None) -> dict:
    """Run the full suite over an open connection; returns a summary.

    ``image_a``/``image_b`` must be two distinct image ids the backend
    accepts. Raises ConformanceFailure on the first violation.
    """
    conn = _Conn(rfile, wfile)
    prompt = list(prompt or [])
    passed: list[str] = []

    def check(name: str) -> None:
        passed.append(name)

    # handshake
    conn.send(WireMessage(type="hello"))
    ack = conn.recv()
    _expect(ack.type == "hello_ack", "hello answered by hello_ack")
    vocab_size = ack.get("vocab_size")
    digest = ack.get("vocab_digest")
    eos = ack.get("eos_token")
    _expect(isinstance(vocab_size, int) and vocab_size >= 2, "vocab_size sane")
    _expect(isinstance(digest, str) and len(digest) >= 16, "vocab digest present")
    _expect(isinstance(eos, int) and 0 <= eos < vocab_size, "eos token in range")
    table = ack.get("token_table")
    if table is not None:
        _expect(len(table) == vocab_size, "token table length matches vocab_size")
        _expect(vocab_digest(table) == digest, "digest matches token table")
    check("handshake")

    # dual-session init
    for sid, image in (("a", image_a), ("b", image_b)):
        conn.send(WireMessage(type="init", session=sid,
                              payload={"image_id": image, "prompt": prompt}))
        reply = conn.recv()
        _expect(reply.type == "init_ack" and reply.session == sid,
                f"init_ack for session {sid!r}")
    check("init")

    # lockstep steps: request both sessions in the same barrier window
    def step(sid: str, index: int) -> np.ndarray:
        conn.send(WireMessage(type="step_request", session=sid,
                              payload={"step": index}))
        reply = conn.recv()
        _expect(reply.type == "logits", f"step_request answered by logits ({sid})")
        _expect(reply.session == sid and reply.get("step") == index,
                "logits echoes session and step")
        if "logits" in reply.payload:
            values = np.asarray(reply.payload["logits"], dtype=np.float64)
        else:
            import base64
            values = np.frombuffer(
                base64.b64decode(reply.payload["logits_f32_b64"]), dtype="<f4"
            ).astype(np.float64)
        _expect(values.size == vocab_size, "logits length equals vocab_size")
        _expect(bool(np.isfinite(values).all()), "logits finite")
        return values

    def feed(sid: str, token: int) -> None:
        conn.send(WireMessage(type="feed", session=sid, payload={"token": token}))
        reply = conn.recv()
        _expect(reply.type == "feed_ack" and reply.session == sid,
                f"feed_ack for session {sid!r}")

    first_a = step("a", 0)
    step("b", 0)
    token = int(np.argmax(first_a))
    feed("a", token)
    feed("b", token)
    step("a", 1)
    step("b", 1)
    check("lockstep")

    # bit-reproducibility: a fresh session with the same context replays
    conn.send(WireMessage(type="init", session="a2",
                          payload={"image_id": image_a, "prompt": prompt}))
    _expect(conn.recv().type == "init_ack", "repeat init acked")
    replay = step("a2", 0)
    _expect(np.array_equal(replay, first_a),
            "identical context reproduces identical logits")
    check("determinism")

    # ordering violation: step index must increase
    conn.send(WireMessage(type="step_request", session="a",
                          payload={"step": 0}))
    reply = conn.recv()
    _expect(reply.type == "error" and reply.get("code") == "ordering",
            "non-increasing step rejected")
    check("step-ordering")

    # unknown session
    conn.send(WireMessage(type="feed", session="ghost", payload={"token": 0}))
    reply = conn.recv()
    _expect(reply.type == "error", "feed before init rejected")
    check("unknown-session")

    # malformed frame; connection must stay alive
    conn.send_raw(b"this is not json\n")
    reply = conn.recv()
    _expect(reply.type == "error" and reply.get("code") == "parse",
            "malformed frame produces a parse error frame")
    check("malformed-frame")

    # wrong protocol version
    bogus = json.dumps({"v": "cicd/999", "type": "hello"}).encode() + b"\n"
    conn.send_raw(bogus)
    reply = conn.recv()
    _expect(reply.type == "error" and reply.get("code") == "version",
            "version mismatch produces a version error frame")
    check("version-check")

    # still alive after errors
    step("a", 2)
    check("alive-after-errors")

    conn.send(WireMessage(type="close"))
    reply = conn.recv()
    _expect(reply.type == "close", "close echoed")
    check("close")

    _expect(PROTOCOL_VERSION == "cicd/1", "suite pinned to cicd/1")
    return {"checks": passed, "vocab_size": vocab_size, "eos_token": eos}
