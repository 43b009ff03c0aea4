from __future__ import annotations

from typing import Any, Generator

from .wire import Kind, Message

# A protocol script yields the frames to send and receives the next incoming one.
Script = Generator[list[Message], Message, Any]


class ProtocolError(RuntimeError):
    """Raised inside an endpoint on an out-of-order or malformed message."""


class ProtocolAbort(RuntimeError):
    """The peer sent ABORT."""


class CoroutineEndpoint:
    """Single-threaded endpoint driven by incoming messages.

    Subclasses implement ``script()`` as a generator. Sequence numbers and the
    session id are checked here; any violation ends the session with ABORT.
    """

    role = "endpoint"

    def __init__(self, session_id: int):
        self.session_id = session_id
        self.finished = False
        self.error: Exception | None = None
        self.result: Any = None
        self._seq = 0
        self._peer_seq = 0
        self._final: list[Message] = []
        self._script = self.script()

    def script(self) -> Script:  # pragma: no cover - abstract
        raise NotImplementedError
        yield []

    def msg(self, kind: Kind, **payload) -> Message:
        self._seq += 1
        return Message(kind, payload, self.session_id, self._seq)

    def send_last(self, *msgs: Message) -> None:
        """Queue frames to go out when the script returns."""
        self._final = list(msgs)

    def expect(self, msg: Message, *kinds: Kind) -> Message:
        if msg.kind not in kinds:
            names = "/".join(k.name for k in kinds)
            raise ProtocolError(f"{self.role}: expected {names}, got {msg.kind.name}")
        return msg

    def start(self) -> list[Message]:
        return self._advance(None)

    def handle(self, msg: Message) -> list[Message]:
        if self.finished:
            return []
        if msg.kind == Kind.ABORT:
            self.finished = True
            self.error = ProtocolAbort(msg.payload.get("reason", ""))
            return []
        if msg.session_id != self.session_id:
            return self._abort(f"session id {msg.session_id} != {self.session_id}")
        if msg.seq != self._peer_seq + 1:
            return self._abort(f"sequence {msg.seq} out of order (expected {self._peer_seq + 1})")
        self._peer_seq = msg.seq
        return self._advance(msg)

    def _advance(self, value: Message | None) -> list[Message]:
        try:
            return self._script.send(value)
        except StopIteration as stop:
            self.finished = True
            self.result = stop.value
            return self._final
        except ProtocolError as exc:
            return self._abort(str(exc))

    def _abort(self, reason: str) -> list[Message]:
        self.finished = True
        self.error = ProtocolError(reason)
        self._script.close()
        return [self.msg(Kind.ABORT, reason=reason)]
