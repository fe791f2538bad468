"""Optional loopback TCP transport for frames.

Each connection carries one request frame and one reply frame, both in
the length-prefixed wire encoding. The simulated network is the
reference transport; this exists so the two CLIs can talk across
processes.
"""

from __future__ import annotations

import logging
import socket
import socketserver
from collections.abc import Callable

from .encoding import read_u32
from .errors import EncodingError, TargetUnavailable, TimError
from .wire import Frame, error

MAX_FRAME = 16 * 1024 * 1024

log = logging.getLogger(__name__)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EncodingError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    head = _read_exact(sock, 4)
    size, _ = read_u32(head, 0)
    if size > MAX_FRAME:
        raise EncodingError(f"frame of {size} bytes exceeds limit")
    return Frame.decode(head + _read_exact(sock, size))


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def tcp_transport(address: str, timeout: float = 30.0) -> Callable[[Frame], Frame]:
    host, port = parse_address(address)

    def call(frame: Frame) -> Frame:
        try:
            with socket.create_connection((host, port), timeout=timeout) as sock:
                sock.sendall(frame.encode())
                return read_frame(sock)
        except OSError as exc:
            raise TargetUnavailable(f"proxy at {address} unreachable: {exc}") from None

    return call


class FrameServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], handler: Callable[[Frame], Frame]):
        self.frame_handler = handler
        super().__init__(address, _Handler)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        try:
            frame = read_frame(self.request)
        except TimError as exc:
            self.request.sendall(error(exc.code, str(exc)).encode())
            return
        except OSError:
            return
        reply = self.server.frame_handler(frame)
        log.info("%s -> %s", frame.kind, reply.kind)
        self.request.sendall(reply.encode())


def serve(handler: Callable[[Frame], Frame], address: str) -> FrameServer:
    """Bind a server; the caller runs ``serve_forever`` (or a thread)."""
    return FrameServer(parse_address(address), handler)
