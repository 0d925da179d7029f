"""Binary wire protocol for live streaming sessions.

Framing: every message is [length: u32 LE][type: u8][payload], where length
counts payload bytes only. Frames travel as raw little-endian f32 with no
compression, which keeps golden-byte tests bit-exact. The same byte layout
rides unchanged inside web-transport binary messages, so one protocol
serves both raw sockets and browsers.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "PROTOCOL_VERSION",
    "MSG_FRAME_IN",
    "MSG_FRAME_OUT",
    "MSG_SET_PROMPT",
    "MSG_SET_REFERENCE",
    "MSG_STATS",
    "MSG_ERROR",
    "MSG_HELLO",
    "ERR_SIZE",
    "ERR_NUMERIC",
    "ERR_UNKNOWN_TYPE",
    "ERR_INVALID",
    "MODE_TV2V",
    "MODE_RV2V",
    "ProtocolError",
    "encode_message",
    "MessageReader",
    "encode_frame",
    "decode_frame",
    "encode_hello",
    "decode_hello",
    "encode_set_prompt",
    "decode_set_prompt",
    "encode_stats",
    "decode_stats",
    "encode_error",
    "decode_error",
]

PROTOCOL_VERSION = 1

MSG_FRAME_IN = 0x01
MSG_FRAME_OUT = 0x02
MSG_SET_PROMPT = 0x03
MSG_SET_REFERENCE = 0x04
MSG_STATS = 0x05
MSG_ERROR = 0x06
MSG_HELLO = 0x07

_KNOWN_TYPES = frozenset(range(MSG_FRAME_IN, MSG_HELLO + 1))

ERR_SIZE = 0x0001
ERR_NUMERIC = 0x0002
ERR_UNKNOWN_TYPE = 0x0003
ERR_INVALID = 0x0004

MODE_TV2V = 0x01  # bitmask bits of the HELLO modes byte
MODE_RV2V = 0x02

MAX_PAYLOAD = 1 << 24  # refuse absurd lengths before allocating

_HEADER = struct.Struct("<IB")
_HELLO = struct.Struct("<HHHB")
_STATS = struct.Struct("<Iff")


class ProtocolError(ValueError):
    """Malformed message or payload."""


def encode_message(mtype: int, payload: bytes = b"") -> bytes:
    if not 0 <= mtype <= 0xFF:
        raise ProtocolError(f"message type {mtype} out of range")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds cap")
    return _HEADER.pack(len(payload), mtype) + payload


class MessageReader:
    """Incremental decoder: feed arbitrary byte chunks, iterate messages.

    Yields (type, payload) pairs; partial messages stay buffered. Unknown
    types are still framed correctly, so they are yielded for the caller
    to reject at its own layer.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)

    def __iter__(self):
        return self

    def __next__(self):
        if len(self._buf) < _HEADER.size:
            raise StopIteration
        length, mtype = _HEADER.unpack_from(self._buf)
        if length > MAX_PAYLOAD:
            raise ProtocolError(f"declared payload {length} exceeds cap")
        if len(self._buf) < _HEADER.size + length:
            raise StopIteration
        payload = bytes(self._buf[_HEADER.size:_HEADER.size + length])
        del self._buf[:_HEADER.size + length]
        return mtype, payload

    def pending(self) -> int:
        return len(self._buf)


# ------------------------------------------------------------ payloads

def encode_frame(pixels: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(pixels, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ProtocolError(f"frame shape {arr.shape} is not [H,W,3]")
    return arr.tobytes()


def decode_frame(payload: bytes, h: int, w: int) -> np.ndarray:
    want = h * w * 3 * 4
    if len(payload) != want:
        raise ProtocolError(
            f"frame payload {len(payload)} bytes, expected {want} for {h}x{w}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 3).copy()


def encode_hello(h: int, w: int, modes: int,
                 version: int = PROTOCOL_VERSION) -> bytes:
    return _HELLO.pack(version, h, w, modes)


def decode_hello(payload: bytes) -> dict:
    if len(payload) != _HELLO.size:
        raise ProtocolError(f"hello payload {len(payload)} bytes, "
                            f"expected {_HELLO.size}")
    version, h, w, modes = _HELLO.unpack(payload)
    return {"version": version, "h": h, "w": w, "modes": modes}


def encode_set_prompt(ids) -> bytes:
    ids = [int(i) for i in ids]
    if any(not 0 <= i <= 0xFFFF for i in ids):
        raise ProtocolError("prompt id out of u16 range")
    return struct.pack(f"<H{len(ids)}H", len(ids), *ids)


def decode_set_prompt(payload: bytes) -> list:
    if len(payload) < 2:
        raise ProtocolError("prompt payload shorter than its count field")
    (count,) = struct.unpack_from("<H", payload)
    want = 2 + 2 * count
    if len(payload) != want:
        raise ProtocolError(
            f"prompt payload {len(payload)} bytes, expected {want} "
            f"for {count} ids")
    return list(struct.unpack_from(f"<{count}H", payload, 2))


def encode_stats(frames: int, mean_ms: float, p95_ms: float) -> bytes:
    return _STATS.pack(frames, mean_ms, p95_ms)


def decode_stats(payload: bytes) -> dict:
    if len(payload) != _STATS.size:
        raise ProtocolError(f"stats payload {len(payload)} bytes, "
                            f"expected {_STATS.size}")
    frames, mean_ms, p95_ms = _STATS.unpack(payload)
    return {"frames": frames, "mean_ms": mean_ms, "p95_ms": p95_ms}


def encode_error(code: int, text: str) -> bytes:
    return struct.pack("<H", code) + text.encode("utf-8")


def decode_error(payload: bytes) -> tuple:
    if len(payload) < 2:
        raise ProtocolError("error payload shorter than its code field")
    (code,) = struct.unpack_from("<H", payload)
    return code, payload[2:].decode("utf-8")
