"""In-process network with interceptors.

Endpoints are named handlers ``handler(src, frame) -> frame``. ``call``
is a synchronous request/response exchange; ``send``/``recv`` give plain
per-pair FIFO queues. Every frame crosses the wire in encoded form and
is decoded again on delivery, so taps and the transcript see real bytes.

A tap is ``tap(src, dst, frame)`` returning the frame to deliver (maybe
modified), ``None`` to drop it, or a ``Redirect`` to reroute a request.
"""

from __future__ import annotations

import threading
from collections import defaultdict, deque
from collections.abc import Callable
from dataclasses import dataclass

from ..errors import TargetUnavailable
from ..wire import Frame
from .transcript import Transcript

Handler = Callable[[str, Frame], Frame]


@dataclass(frozen=True)
class Redirect:
    dst: str
    frame: Frame


Tap = Callable[[str, str, Frame], "Frame | Redirect | None"]


class SimNetwork:
    def __init__(self, transcript: Transcript | None = None):
        self.transcript = transcript
        self.endpoints: dict[str, Handler] = {}
        self.taps: list[Tap] = []
        self._queues: dict[tuple[str, str], deque[bytes]] = defaultdict(deque)
        self._lock = threading.Lock()

    def register(self, name: str, handler: Handler) -> None:
        self.endpoints[name] = handler

    def unregister(self, name: str) -> None:
        self.endpoints.pop(name, None)

    def _record(self, src: str, dst: str, direction: str, frame: Frame) -> None:
        if self.transcript is not None:
            self.transcript.add_frame(src, dst, direction, frame.encode())

    def _tap(self, src: str, dst: str, frame: Frame) -> tuple[str, Frame | None]:
        for tap in list(self.taps):
            out = tap(src, dst, frame)
            if out is None:
                return dst, None
            if isinstance(out, Redirect):
                dst, frame = out.dst, out.frame
            else:
                frame = out
        return dst, frame

    def call(self, src: str, dst: str, frame: Frame) -> Frame:
        dst, delivered = self._tap(src, dst, Frame.decode(frame.encode()))
        if delivered is None:
            raise TargetUnavailable(f"request to {dst} was dropped")
        handler = self.endpoints.get(dst)
        if handler is None:
            raise TargetUnavailable(f"no endpoint named {dst!r}")
        self._record(src, dst, "request", delivered)
        reply = handler(src, Frame.decode(delivered.encode()))
        _, reply = self._tap(dst, src, Frame.decode(reply.encode()))
        if reply is None:
            raise TargetUnavailable(f"reply from {dst} was dropped")
        self._record(dst, src, "response", reply)
        return Frame.decode(reply.encode())

    def send(self, src: str, dst: str, frame: Frame) -> None:
        dst, delivered = self._tap(src, dst, frame)
        if delivered is None:
            return
        self._record(src, dst, "message", delivered)
        with self._lock:
            self._queues[(src, dst)].append(delivered.encode())

    def recv(self, dst: str, src: str) -> Frame | None:
        with self._lock:
            q = self._queues.get((src, dst))
            if not q:
                return None
            return Frame.decode(q.popleft())
