"""Off-chain endpoints reachable from the built-in oracle contract.

Only the executing miner ever calls a client; every other node reads the
recorded (request, response) pair out of the block.  Each client counts its
outbound calls so a run can prove that one oracle transaction produced one
request network-wide.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from typing import Callable, Iterable, Mapping, Optional, Protocol

_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 20


class OffchainUnavailable(Exception):
    pass


class OffchainClient(Protocol):
    calls: int

    def call(self, request: bytes) -> bytes: ...


class FixtureClient:
    """Static request -> response table."""

    def __init__(self, table: Mapping[bytes, bytes]):
        self.table = dict(table)
        self.calls = 0

    def call(self, request: bytes) -> bytes:
        self.calls += 1
        try:
            return self.table[request]
        except KeyError:
            raise OffchainUnavailable(f"no fixture for {request!r}") from None


class FaultInjectingClient:
    """Fails on chosen requests, otherwise delegates."""

    def __init__(self, inner: OffchainClient, fail_on: Iterable[bytes] = (),
                 predicate: Optional[Callable[[bytes], bool]] = None):
        self.inner = inner
        self.fail_on = frozenset(fail_on)
        self.predicate = predicate
        self.calls = 0

    def call(self, request: bytes) -> bytes:
        self.calls += 1
        if request in self.fail_on or (self.predicate is not None and self.predicate(request)):
            raise OffchainUnavailable(f"injected fault for {request!r}")
        return self.inner.call(request)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise OffchainUnavailable("connection closed mid-frame")
        buf += chunk
    return buf


def _read_frame(sock: socket.socket) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise OffchainUnavailable(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


class SocketClient:
    """One request per TCP connection, 4-byte big-endian length framing."""

    def __init__(self, host: str, port: int, timeout: float = 2.0):
        self.address = (host, port)
        self.timeout = timeout
        self.calls = 0

    def call(self, request: bytes) -> bytes:
        self.calls += 1
        try:
            with socket.create_connection(self.address, timeout=self.timeout) as sock:
                sock.sendall(_LEN.pack(len(request)) + request)
                return _read_frame(sock)
        except (OSError, struct.error) as exc:
            raise OffchainUnavailable(str(exc)) from None


class _StubHandler(socketserver.BaseRequestHandler):
    def handle(self):
        try:
            request = _read_frame(self.request)
        except OffchainUnavailable:
            return
        response = self.server.table.get(request)
        if response is None:
            return  # closing without a reply is how the stub signals failure
        self.request.sendall(_LEN.pack(len(response)) + response)


class StubServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, table: Mapping[bytes, bytes], host: str = "127.0.0.1", port: int = 0):
        self.table = dict(table)
        super().__init__((host, port), _StubHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "StubServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
