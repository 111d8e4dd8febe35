"""Frame transports, payload accounting and transcript recording.

Two transports share one interface: an in-memory loopback pair for
single-process runs and tests, and TCP. Every frame passing through a channel
is tallied by a :class:`PayloadCounter` and optionally appended to a
transcript file.
"""
from __future__ import annotations

import json
import queue
import socket
import struct
import threading
import time
from pathlib import Path

from fedgbm.errors import (ConfigMismatchError, ProtocolError, SecurityAbort,
                           TransportError)
from fedgbm.metrics import RECV, SENT, PayloadCounter
from fedgbm.protocol.frames import (HEADER, Frame, MsgType, decode_message,
                                    encode_message, parse_header)

# ABORT reason codes and the exception each maps to on the receiving side
ABORT_ERRORS = {
    "CONFIG_MISMATCH": ConfigMismatchError,
    "VERSION": ProtocolError,
    "REPLAY": SecurityAbort,
    "SECURITY": SecurityAbort,
    "PROTOCOL": ProtocolError,
    "TRANSPORT": TransportError,
}


class TranscriptWriter:
    """Append-only record: ``direction u8 (0 sent, 1 recv) | u64 length | frame``."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "wb")
        self._lock = threading.Lock()

    def write(self, direction: str, raw: bytes) -> None:
        with self._lock:
            self._fh.write(struct.pack(">BQ", 0 if direction == SENT else 1, len(raw)) + raw)
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


def read_transcript(path) -> list[tuple[str, Frame]]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        d, length = struct.unpack_from(">BQ", data, pos)
        pos += 9
        raw = data[pos:pos + length]
        pos += length
        mt, plen = parse_header(raw[:HEADER.size])
        out.append((SENT if d == 0 else RECV, Frame(mt, raw[HEADER.size:HEADER.size + plen])))
    return out


class Channel:
    """Common framing logic; subclasses move raw frame bytes."""

    def __init__(self, transcript=None):
        self.counter = PayloadCounter()
        self.transcript = TranscriptWriter(transcript) if transcript else None
        self.closed = False

    # transport hooks
    def _send_raw(self, raw: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> Frame:
        raise NotImplementedError

    def _close(self) -> None:
        pass

    def send(self, msg_type: MsgType, payload: bytes = b"") -> None:
        if self.closed:
            raise TransportError("channel is closed")
        frame = Frame(MsgType(msg_type), payload)
        raw = frame.encode()
        self._send_raw(raw)
        self.counter.record(SENT, frame)
        if self.transcript:
            self.transcript.write(SENT, raw)

    def recv(self, expected=None) -> Frame:
        frame = self._recv_frame()
        self.counter.record(RECV, frame)
        if self.transcript:
            self.transcript.write(RECV, frame.encode())
        if frame.msg_type == MsgType.ABORT:
            meta, _ = decode_message(frame.payload)
            code = meta.get("code", "PROTOCOL")
            raise ABORT_ERRORS.get(code, ProtocolError)(f"peer aborted: {code}: {meta.get('reason', '')}")
        if expected is not None:
            allowed = (expected,) if isinstance(expected, int) else tuple(expected)
            if frame.msg_type not in allowed:
                names = ",".join(MsgType(a).name for a in allowed)
                raise ProtocolError(f"expected {names}, got {frame.msg_type.name}")
        return frame

    def send_message(self, msg_type: MsgType, meta: dict | None = None, **sections: bytes) -> None:
        self.send(msg_type, encode_message(meta, **sections))

    def recv_message(self, expected) -> tuple[dict, dict[str, bytes]]:
        return decode_message(self.recv(expected).payload)

    def abort(self, code: str, reason: str = "") -> None:
        """Best effort: tell the peer why the session ends."""
        try:
            self.send_message(MsgType.ABORT, {"code": code, "reason": reason})
        except Exception:
            pass

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._close()
        if self.transcript:
            self.transcript.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class LoopbackChannel(Channel):
    """One end of an in-memory duplex pipe.

    ``fail_after`` makes the channel raise :class:`TransportError` once that
    many frames have been sent, which simulates a dropped connection.
    """

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, transcript=None,
                 timeout: float | None = None, fail_after: int | None = None):
        super().__init__(transcript)
        self._inbox = inbox
        self._outbox = outbox
        self.timeout = timeout
        self.fail_after = fail_after
        self._sent = 0

    @classmethod
    def pair(cls, transcript_a=None, transcript_b=None, timeout=None):
        q1, q2 = queue.Queue(), queue.Queue()
        return cls(q1, q2, transcript_a, timeout), cls(q2, q1, transcript_b, timeout)

    def _send_raw(self, raw: bytes) -> None:
        if self.fail_after is not None and self._sent >= self.fail_after:
            self.close()
            raise TransportError("connection dropped (injected fault)")
        self._sent += 1
        self._outbox.put(raw)

    def _recv_frame(self) -> Frame:
        if self.closed:
            raise TransportError("channel is closed")
        try:
            raw = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError("receive timed out") from None
        if raw is _CLOSED:
            self.closed = True
            raise TransportError("peer closed the connection")
        mt, length = parse_header(raw[:HEADER.size])
        payload = raw[HEADER.size:]
        if len(payload) != length:
            raise ProtocolError("frame length mismatch")
        return Frame(mt, payload)

    def _close(self) -> None:
        self._outbox.put(_CLOSED)


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket, transcript=None):
        super().__init__(transcript)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, host: str, port: int, transcript=None, retry_s: float = 10.0,
                timeout: float | None = None):
        """Connect, retrying for ``retry_s``; ``timeout`` bounds each later read."""
        deadline = time.monotonic() + retry_s
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=retry_s)
                sock.settimeout(timeout)
                return cls(sock, transcript)
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise TransportError(f"cannot connect to {host}:{port}: {exc}") from None
                time.sleep(0.1)

    @classmethod
    def listen(cls, host: str, port: int, transcript=None, timeout: float | None = None):
        """Accept one connection and return the channel."""
        with socket.create_server((host, port), reuse_port=False) as srv:
            srv.settimeout(timeout)
            try:
                sock, _ = srv.accept()
            except OSError as exc:
                raise TransportError(f"accept failed: {exc}") from None
        sock.settimeout(timeout)
        return cls(sock, transcript)

    def _send_raw(self, raw: bytes) -> None:
        try:
            self.sock.sendall(raw)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from None
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def _recv_frame(self) -> Frame:
        mt, length = parse_header(self._read_exact(HEADER.size))
        return Frame(mt, self._read_exact(length))

    def _close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise TransportError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


def counter_summary(counter: PayloadCounter) -> str:
    return json.dumps({"sent": counter.bytes_sent, "recv": counter.bytes_received})
