"""Transports carrying framed messages between the two endpoints.

Endpoints are passive state machines (``start()``/``handle()`` return the
frames to send); the functions here move frames between them. ``run_loopback``
pumps both endpoints in one thread, ``run_endpoint`` drives one endpoint over
a socket.
"""
from __future__ import annotations

import socket
import struct
import time
from collections import deque
from pathlib import Path
from typing import Protocol

from .wire import HEADER, Message, decode, encode


class TransportError(RuntimeError):
    pass


class Endpoint(Protocol):
    finished: bool

    def start(self) -> list[Message]: ...

    def handle(self, msg: Message) -> list[Message]: ...


class Transcript:
    """Verbatim record of every frame that crossed the public channel."""

    def __init__(self, path: str | Path | None = None):
        self.frames: list[tuple[str, bytes]] = []
        self._fh = open(path, "wb") if path is not None else None

    def record(self, sender: str, frame: bytes) -> None:
        self.frames.append((sender, frame))
        if self._fh is not None:
            self._fh.write(frame)

    def messages(self) -> list[tuple[str, Message]]:
        return [(sender, decode(frame)) for sender, frame in self.frames]

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def run_loopback(alice: Endpoint, bob: Endpoint, transcript: Transcript | None = None,
                 throttle_s: float = 0.0) -> None:
    """Run both endpoints to completion in the calling thread."""
    queue: deque[tuple[str, bytes]] = deque()

    def post(sender: str, msgs: list[Message]) -> None:
        for m in msgs:
            frame = encode(m)
            if transcript is not None:
                transcript.record(sender, frame)
            queue.append((sender, frame))

    post("alice", alice.start())
    post("bob", bob.start())
    while queue:
        sender, frame = queue.popleft()
        if throttle_s:
            time.sleep(throttle_s)
        target, name = (bob, "bob") if sender == "alice" else (alice, "alice")
        if target.finished:
            continue
        post(name, target.handle(decode(frame)))


class SocketTransport:
    def __init__(self, sock: socket.socket, transcript: Transcript | None = None, name: str = ""):
        self.sock = sock
        self.transcript = transcript
        self.name = name

    @classmethod
    def listen(cls, host: str, port: int, timeout: float = 30.0, **kw) -> "SocketTransport":
        with socket.create_server((host, port)) as server:
            server.settimeout(timeout)
            try:
                conn, _ = server.accept()
            except OSError as exc:
                raise TransportError(f"no peer connected to {host}:{port}: {exc}") from exc
        conn.settimeout(timeout)
        return cls(conn, **kw)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0, retry_s: float = 5.0, **kw) -> "SocketTransport":
        deadline = time.monotonic() + retry_s
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
                time.sleep(0.05)
        sock.settimeout(timeout)
        return cls(sock, **kw)

    def send(self, msg: Message) -> None:
        frame = encode(msg)
        if self.transcript is not None:
            self.transcript.record(self.name, frame)
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def recv(self) -> Message:
        head = self._recv_exact(HEADER.size)
        (length,) = struct.unpack_from(">I", head)
        return decode(head + self._recv_exact(length))

    def close(self) -> None:
        self.sock.close()


def run_endpoint(endpoint: Endpoint, transport: SocketTransport) -> None:
    for m in endpoint.start():
        transport.send(m)
    while not endpoint.finished:
        for m in endpoint.handle(transport.recv()):
            transport.send(m)
