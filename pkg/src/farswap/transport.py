"""Frame delivery between the donee and donor engines.

Two interchangeable transports carry the same frames:

* an in-process loopback pair with an optional latency model, used by tests
  and single-process deployments, and
* a length-implicit TCP stream for two-process deployment.

On the stream each frame is a 1-byte kind tag followed by the body::

    tag 0x01  Command64   64-byte body (command or completion block)
    tag 0x02  Packet4160  4160-byte body (store request or load response)

Frames on one connection are delivered in send order. There is no
transport-layer encryption or peer authentication: deployments must provide
the same physical trust the engines assume (see docs/protocol.md).
"""

from __future__ import annotations

import itertools
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .wire import COMMAND_SIZE, PACKET_SIZE

KIND_COMMAND = 0x01
KIND_PACKET = 0x02

_KIND_SIZES = {KIND_COMMAND: COMMAND_SIZE, KIND_PACKET: PACKET_SIZE}


class TransportError(Exception):
    pass


class Disconnected(TransportError):
    pass


class Timeout(TransportError):
    pass


class CorruptFraming(TransportError):
    """Unknown kind tag on the stream; the connection is dropped."""


@dataclass(frozen=True, slots=True)
class Frame:
    kind: int
    payload: bytes

    def __post_init__(self):
        expected = _KIND_SIZES.get(self.kind)
        if expected is None:
            raise ValueError(f"unknown frame kind {self.kind:#04x}")
        if len(self.payload) != expected:
            raise ValueError(
                f"frame kind {self.kind:#04x} requires {expected} bytes, got {len(self.payload)}"
            )


def command_frame(block: bytes) -> Frame:
    return Frame(KIND_COMMAND, block)


def packet_frame(block: bytes) -> Frame:
    return Frame(KIND_PACKET, block)


class LatencyModel:
    """Delay source for loopback deliveries; returns seconds per frame."""

    def delay(self) -> float:
        return 0.0


@dataclass
class FixedDelay(LatencyModel):
    seconds: float

    def delay(self) -> float:
        return self.seconds


class RandomDelay(LatencyModel):
    """Uniform random delay in [min_seconds, max_seconds)."""

    def __init__(self, min_seconds: float, max_seconds: float, seed: int | None = None):
        self.min_seconds = min_seconds
        self.max_seconds = max_seconds
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def delay(self) -> float:
        with self._lock:
            return self._rng.uniform(self.min_seconds, self.max_seconds)


class Endpoint:
    """One side of a connection: a sender/receiver pair of frame streams."""

    def __init__(self):
        self._token_counter = itertools.count(1)

    def next_token(self) -> int:
        """Fresh correlation token, unique among in-flight requests here."""
        return next(self._token_counter)

    def send_frame(self, frame: Frame) -> None:
        raise NotImplementedError

    def recv_frame(self, timeout: float | None = None) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


_CLOSED = object()


class LoopbackEndpoint(Endpoint):
    """In-process endpoint; see loopback_pair().

    The optional ``tamper`` hook is a fault-injection point for adversarial
    tests: it may rewrite (or drop, by returning None) every frame this
    endpoint sends.
    """

    def __init__(self, latency: LatencyModel | None):
        super().__init__()
        self._latency = latency
        self._inbox: queue.Queue = queue.Queue()
        self._peer: "LoopbackEndpoint" | None = None
        self._closed = False
        self._send_lock = threading.Lock()
        self._last_deliver_at = 0.0
        self.tamper: Optional[Callable[[Frame], Optional[Frame]]] = None

    def send_frame(self, frame: Frame) -> None:
        peer = self._peer
        if self._closed or peer is None or peer._closed:
            raise Disconnected("loopback endpoint is closed")
        if self.tamper is not None:
            tampered = self.tamper(frame)
            if tampered is None:
                return
            frame = tampered
        with self._send_lock:
            # Monotone delivery times keep per-connection FIFO even when the
            # latency model hands out non-monotone delays.
            deliver_at = time.monotonic()
            if self._latency is not None:
                deliver_at += self._latency.delay()
            deliver_at = max(deliver_at, self._last_deliver_at)
            self._last_deliver_at = deliver_at
            peer._inbox.put((deliver_at, frame))

    def recv_frame(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                item = self._inbox.get(timeout=remaining)
            except queue.Empty:
                raise Timeout("no frame within timeout") from None
            if item is _CLOSED:
                raise Disconnected("peer closed")
            deliver_at, frame = item
            delay = deliver_at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            return frame

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._inbox.put(_CLOSED)
        peer = self._peer
        if peer is not None and not peer._closed:
            peer._inbox.put(_CLOSED)


def loopback_pair(latency_model: LatencyModel | None = None) -> tuple[LoopbackEndpoint, LoopbackEndpoint]:
    """Two connected in-process endpoints sharing one latency model."""
    a = LoopbackEndpoint(latency_model)
    b = LoopbackEndpoint(latency_model)
    a._peer = b
    b._peer = a
    return a, b


def _recv_exact(sock: socket.socket, n: int, deadline: float | None) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Timeout("receive deadline expired")
            sock.settimeout(remaining)
        else:
            sock.settimeout(None)
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise Timeout("receive deadline expired") from None
        except OSError as exc:
            raise Disconnected(str(exc)) from exc
        if not chunk:
            raise Disconnected("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


class TcpEndpoint(Endpoint):
    def __init__(self, sock: socket.socket):
        super().__init__()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self._closed = False

    def send_frame(self, frame: Frame) -> None:
        data = bytes((frame.kind,)) + frame.payload
        with self._send_lock:
            if self._closed:
                raise Disconnected("endpoint closed")
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise Disconnected(str(exc)) from exc

    def recv_frame(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._recv_lock:
            if self._closed:
                raise Disconnected("endpoint closed")
            tag = _recv_exact(self._sock, 1, deadline)[0]
            size = _KIND_SIZES.get(tag)
            if size is None:
                self.close()
                raise CorruptFraming(f"unknown kind tag {tag:#04x}")
            payload = _recv_exact(self._sock, size, deadline)
        return Frame(tag, payload)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, host: str, port: int):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self.host, self.port = self._sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpEndpoint:
        self._sock.settimeout(timeout)
        try:
            conn, _addr = self._sock.accept()
        except socket.timeout:
            raise Timeout("no connection within timeout") from None
        except OSError as exc:
            raise Disconnected(str(exc)) from exc
        return TcpEndpoint(conn)

    def close(self) -> None:
        self._sock.close()


def listen_tcp(host: str, port: int) -> TcpListener:
    return TcpListener(host, port)


def connect_tcp(host: str, port: int, timeout: float | None = 10.0) -> TcpEndpoint:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except socket.timeout:
        raise Timeout(f"connect to {host}:{port} timed out") from None
    except OSError as exc:
        raise Disconnected(f"connect to {host}:{port} failed: {exc}") from exc
    sock.settimeout(None)
    return TcpEndpoint(sock)
