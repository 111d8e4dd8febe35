"""Wire framing and payload codecs.

Frame: ``b"SGBM" | version u8 | msg_type u8 | length u64 BE | payload``.
Payloads are a small JSON header (non-sensitive scalars only) followed by
named binary sections::

    u32 header_len | header JSON | section bytes ...

The header lists the sections as ``"_sections": [[name, length], ...]``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from fedgbm.errors import ProtocolError

MAGIC = b"SGBM"
VERSION = 1
HEADER = struct.Struct(">4sBBQ")
MAX_PAYLOAD = 1 << 30


class MsgType(IntEnum):
    HELLO = 0x01
    CONFIG_HASH = 0x02
    PSI_OFFER = 0x03
    PSI_REPLY = 0x04
    PSI_RESULT = 0x05
    BATCH_ANNOUNCE = 0x10
    ENC_GRADIENTS = 0x11
    SPLIT_CANDIDATES = 0x12
    SPLIT_WINNER = 0x13
    PARTITION = 0x14
    INFER_ROUTE_REQ = 0x20
    INFER_ROUTE_RESP = 0x21
    ABORT = 0x30


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes

    def encode(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, int(self.msg_type), len(self.payload)) + self.payload

    def __len__(self) -> int:
        return HEADER.size + len(self.payload)


def parse_header(header: bytes) -> tuple[MsgType, int]:
    if len(header) != HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, version, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type 0x{msg_type:02x}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds limit")
    return mt, length


def decode_frame(data: bytes) -> Frame:
    mt, length = parse_header(data[:HEADER.size])
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"frame length mismatch: header {length}, got {len(payload)}")
    return Frame(mt, payload)


# -- payload codec ------------------------------------------------------------

def encode_message(meta: dict | None = None, **sections: bytes) -> bytes:
    header = dict(meta or {})
    header["_sections"] = [[name, len(data)] for name, data in sections.items()]
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack(">I", len(hb)) + hb + b"".join(sections.values())


def decode_message(payload: bytes) -> tuple[dict, dict[str, bytes]]:
    try:
        (hlen,) = struct.unpack_from(">I", payload, 0)
        meta = json.loads(payload[4:4 + hlen])
        offset = 4 + hlen
        sections = {}
        for name, length in meta.pop("_sections"):
            if offset + length > len(payload):
                raise ProtocolError("section overruns payload")
            sections[name] = payload[offset:offset + length]
            offset += length
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed payload: {exc}") from None
    if offset != len(payload):
        raise ProtocolError("trailing bytes in payload")
    return meta, sections


def pack_u32(values) -> bytes:
    return np.asarray(values, dtype=">u4").tobytes()


def unpack_u32(data: bytes) -> np.ndarray:
    if len(data) % 4:
        raise ProtocolError("u32 section length not a multiple of 4")
    return np.frombuffer(data, dtype=">u4").astype(np.int64)


def pack_bits(mask) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    return struct.pack(">I", mask.size) + np.packbits(mask).tobytes()


def unpack_bits(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise ProtocolError("truncated bit vector")
    (n,) = struct.unpack_from(">I", data, 0)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=4))
    if bits.size < n or bits.size - n >= 8:
        raise ProtocolError("bit vector length mismatch")
    return bits[:n].astype(bool)


def pack_ciphertexts(blob: bytes, width: int) -> bytes:
    """Length-prefixed vector of fixed-width big-endian ciphertexts."""
    if width <= 0 or len(blob) % width:
        raise ValueError("blob is not a whole number of ciphertexts")
    return struct.pack(">IH", len(blob) // width, width) + blob


def unpack_ciphertexts(data: bytes) -> np.ndarray:
    """Return a ``(count, width)`` uint8 matrix."""
    if len(data) < 6:
        raise ProtocolError("truncated ciphertext vector")
    count, width = struct.unpack_from(">IH", data, 0)
    body = data[6:]
    if width == 0 or len(body) != count * width:
        raise ProtocolError("ciphertext vector length mismatch")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, width)


def rows_to_ints(matrix: np.ndarray) -> list[int]:
    width = matrix.shape[1] if matrix.ndim == 2 else 0
    raw = matrix.tobytes()
    return [int.from_bytes(raw[i:i + width], "big") for i in range(0, len(raw), width)] if width else []


def ints_to_rows(values, width: int) -> np.ndarray:
    raw = b"".join(int(v).to_bytes(width, "big") for v in values)
    return np.frombuffer(raw, dtype=np.uint8).reshape(len(values), width)
