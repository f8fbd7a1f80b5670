"""Serve a model over the cicd/1 protocol on stdio or a local socket.

One request, one reply. Malformed or misordered input produces an error
frame and the connection stays alive; a close frame is echoed and ends
the loop. Step indices must strictly increase per session.
"""

from __future__ import annotations

import socket
import sys

from .wire import WireError, decode_frame, encode_frame, logits_payload, vocab_digest


class SessionRecord:
    def __init__(self, session):
        self.session = session
        self.last_step = -1


def serve_connection(model, rfile, wfile, *, logits_b64: bool = False,
                     max_sessions: int = 64) -> None:
    table = list(model.token_table)
    digest = vocab_digest(table)
    sessions: dict[str, SessionRecord] = {}

    def send(msg_type: str, session: str = "", **payload) -> None:
        wfile.write(encode_frame(msg_type, session, **payload))
        wfile.flush()

    def send_error(code: str, message: str, session: str = "") -> None:
        send("error", session, code=code, message=message)

    for raw in rfile:
        if not raw.strip():
            continue
        try:
            msg = decode_frame(raw)
        except WireError as exc:
            send_error(exc.code, str(exc))
            continue

        msg_type = msg["type"]
        sid = msg.get("session", "")

        if msg_type == "hello":
            ack = {"vocab_size": model.vocab_size, "vocab_digest": digest,
                   "eos_token": int(model.eos_id)}
            if model.vocab_size <= 65536:
                ack["token_table"] = table
            send("hello_ack", **ack)
        elif msg_type == "close":
            send("close")
            break
        elif msg_type == "init":
            if not sid:
                send_error("bad_request", "init requires a session id")
            elif sid in sessions:
                send_error("bad_request", f"session {sid!r} already initialized", sid)
            elif len(sessions) >= max_sessions:
                send_error("capacity", f"session limit {max_sessions} reached", sid)
            else:
                try:
                    session = model.open_session(msg.get("image_id"),
                                                 msg.get("prompt", []))
                except Exception as exc:
                    send_error("init_failed", str(exc), sid)
                    continue
                sessions[sid] = SessionRecord(session)
                send("init_ack", sid)
        elif sid not in sessions:
            send_error("unknown_session", f"session {sid!r} not initialized", sid)
        elif msg_type == "step_request":
            record = sessions[sid]
            step = msg.get("step")
            if not isinstance(step, int) or step <= record.last_step:
                send_error("ordering",
                           f"step {step!r} not increasing (last {record.last_step})",
                           sid)
                continue
            try:
                values = record.session.step_logits()
            except Exception as exc:
                send_error("backend", str(exc), sid)
                continue
            record.last_step = step
            send("logits", sid, step=step, **logits_payload(values, use_b64=logits_b64))
        elif msg_type == "feed":
            token = msg.get("token")
            if not isinstance(token, int) or not 0 <= token < model.vocab_size:
                send_error("bad_request", f"bad token {token!r}", sid)
                continue
            try:
                sessions[sid].session.feed(token)
            except Exception as exc:
                send_error("backend", str(exc), sid)
                continue
            send("feed_ack", sid)
        else:
            send_error("bad_request", f"unexpected {msg_type!r} from client", sid)


def serve_stdio(model, *, logits_b64: bool = False, max_sessions: int = 64) -> None:
    serve_connection(model, sys.stdin.buffer, sys.stdout.buffer,
                     logits_b64=logits_b64, max_sessions=max_sessions)


def serve_socket(model, address: str, *, once: bool = False,
                 logits_b64: bool = False, max_sessions: int = 64) -> None:
    if address.startswith("/"):
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(address)
    else:
        host, port = address.rsplit(":", 1)
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, int(port)))
    server.listen(1)
    try:
        while True:
            conn, _addr = server.accept()
            with conn:
                serve_connection(model, conn.makefile("rb"), conn.makefile("wb"),
                                 logits_b64=logits_b64, max_sessions=max_sessions)
            if once:
                break
    finally:
        server.close()
