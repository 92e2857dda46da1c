"""Framed message channels between the two parties, with exact byte meters.

Wire format: every message is one frame ``type (1 byte) | length (4 bytes,
big-endian) | payload``.  Ciphertexts travel as fixed-width big-endian
strings of ``2 * key_bits / 8`` bytes; plaintext integers as a 4-byte length
prefix followed by the minimal big-endian encoding.  Meters count exactly the
framed bytes, so communication totals reproduce bit-for-bit under a seed.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

FRAME_HEADER_BYTES = 5

CIPHER = 1
CIPHER_BATCH = 2
PLAIN = 3
CONTROL = 4

A_TO_B = "a->b"
B_TO_A = "b->a"


class TransportError(RuntimeError):
    """Channel closed or framing violated."""


@dataclass(frozen=True)
class Frame:
    ftype: int
    payload: bytes

    def encode(self) -> bytes:
        return struct.pack(">BI", self.ftype, len(self.payload)) + self.payload

    @property
    def wire_bytes(self) -> int:
        return FRAME_HEADER_BYTES + len(self.payload)


def decode_frame(data: bytes) -> Frame:
    if len(data) < FRAME_HEADER_BYTES:
        raise TransportError("short frame")
    ftype, length = struct.unpack(">BI", data[:FRAME_HEADER_BYTES])
    payload = data[FRAME_HEADER_BYTES:]
    if len(payload) != length:
        raise TransportError("frame length mismatch")
    return Frame(ftype, payload)


def encode_plain_int(value: int) -> bytes:
    """Minimal big-endian integer with a 4-byte length prefix."""
    if value < 0:
        raise ValueError("plain integers on the wire are non-negative")
    body = value.to_bytes(max((value.bit_length() + 7) // 8, 1), "big")
    return struct.pack(">I", len(body)) + body


def decode_plain_int(payload: bytes) -> int:
    (length,) = struct.unpack(">I", payload[:4])
    if len(payload) != 4 + length:
        raise TransportError("plain integer length mismatch")
    return int.from_bytes(payload[4:], "big")


@dataclass
class DirectionMeter:
    messages: int = 0
    bytes: int = 0
    ciphertexts: int = 0
    plaintexts: int = 0

    def copy(self) -> "DirectionMeter":
        return DirectionMeter(self.messages, self.bytes, self.ciphertexts,
                              self.plaintexts)


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str
    ftype: int
    tag: str
    n_bytes: int
    payload: bytes | None


@dataclass
class BandwidthModel:
    bits_per_second: int

    def __post_init__(self):
        if self.bits_per_second <= 0:
            raise ValueError("bandwidth must be positive")


def mbps(rate: float) -> BandwidthModel:
    return BandwidthModel(int(rate * 1_000_000))


class Channel:
    """Base channel: metering, transcripts, direction bookkeeping.

    Sends and receives must pair up FIFO per direction.  ``ciphertexts`` /
    ``plaintexts`` passed to :meth:`send` count the transferred units inside
    a frame (a batch frame carries several).
    """

    def __init__(self, record_payloads: bool = False):
        self.meters = {A_TO_B: DirectionMeter(), B_TO_A: DirectionMeter()}
        self.transcript: list[TranscriptEntry] = []
        self.record_payloads = record_payloads
        self._legs = 0
        self._last_direction: str | None = None

    def send(self, direction: str, frame: Frame, tag: str = "",
             ciphertexts: int = 0, plaintexts: int = 0) -> None:
        meter = self.meters[direction]
        meter.messages += 1
        meter.bytes += frame.wire_bytes
        meter.ciphertexts += ciphertexts
        meter.plaintexts += plaintexts
        if direction != self._last_direction:
            self._legs += 1
            self._last_direction = direction
        self.transcript.append(
            TranscriptEntry(direction, frame.ftype, tag, frame.wire_bytes,
                            frame.payload if self.record_payloads else None)
        )
        self._deliver(direction, frame)

    def recv(self, direction: str) -> Frame:
        return self._fetch(direction)

    def _deliver(self, direction: str, frame: Frame) -> None:
        raise NotImplementedError

    def _fetch(self, direction: str) -> Frame:
        raise NotImplementedError

    @property
    def round_trips(self) -> int:
        return self._legs // 2

    def total_bytes(self) -> int:
        return self.meters[A_TO_B].bytes + self.meters[B_TO_A].bytes

    def total_units(self) -> int:
        return sum(m.ciphertexts + m.plaintexts for m in self.meters.values())

    def snapshot(self) -> dict[str, DirectionMeter]:
        return {d: m.copy() for d, m in self.meters.items()}


class LoopbackChannel(Channel):
    """In-process queue pair; the default deterministic transport."""

    def __init__(self, record_payloads: bool = False):
        super().__init__(record_payloads)
        self._queues: dict[str, list[bytes]] = {A_TO_B: [], B_TO_A: []}
        self._open = True

    def _deliver(self, direction: str, frame: Frame) -> None:
        if not self._open:
            raise TransportError("channel closed")
        self._queues[direction].append(frame.encode())

    def _fetch(self, direction: str) -> Frame:
        if not self._open:
            raise TransportError("channel closed")
        queue = self._queues[direction]
        if not queue:
            raise TransportError(f"no pending frame on {direction}")
        return decode_frame(queue.pop(0))

    def close(self) -> None:
        self._open = False


class SocketChannel(Channel):
    """Stream-socket transport with the same framing and meters.

    Holds one socket per endpoint; each direction writes on its sender's
    socket and reads on the receiver's.  No TLS.
    """

    def __init__(self, sock_a: socket.socket, sock_b: socket.socket,
                 record_payloads: bool = False):
        super().__init__(record_payloads)
        self._socks = {A_TO_B: (sock_a, sock_b), B_TO_A: (sock_b, sock_a)}

    @classmethod
    def pair(cls, record_payloads: bool = False) -> "SocketChannel":
        sock_a, sock_b = socket.socketpair()
        return cls(sock_a, sock_b, record_payloads)

    def _deliver(self, direction: str, frame: Frame) -> None:
        sender, _ = self._socks[direction]
        try:
            sender.sendall(frame.encode())
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def _fetch(self, direction: str) -> Frame:
        _, receiver = self._socks[direction]
        header = self._read_exact(receiver, FRAME_HEADER_BYTES)
        _, length = struct.unpack(">BI", header)
        payload = self._read_exact(receiver, length)
        return decode_frame(header + payload)

    @staticmethod
    def _read_exact(sock: socket.socket, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            data = sock.recv(remaining)
            if not data:
                raise TransportError("peer closed the socket")
            chunks.append(data)
            remaining -= len(data)
        return b"".join(chunks)

    def close(self) -> None:
        for sock, _ in self._socks.values():
            sock.close()


def estimate_wallclock(meters, pure_time_seconds: float,
                       model: BandwidthModel) -> float:
    """Pure computation time plus transfer time of the metered bytes."""
    if isinstance(meters, Channel):
        total = meters.total_bytes()
    elif isinstance(meters, int):
        total = meters
    else:
        total = sum(m.bytes for m in meters.values())
    return pure_time_seconds + total * 8 / model.bits_per_second
