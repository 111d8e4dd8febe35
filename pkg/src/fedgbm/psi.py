"""Private set intersection by commutative blinding on X25519.

Each id is hashed to a curve25519 u-coordinate and multiplied by a party's
secret scalar. Scalar multiplication commutes, so an id blinded by both
parties yields the same 32 bytes regardless of order, while a singly blinded
point reveals nothing about the id without the key.

Full intersection (both parties learn it)::

    A -> B  PSI_OFFER   a * H(x) for A's ids, shuffled
    B -> A  PSI_REPLY   b * (a * H(x)) in offer order, and b * H(y) shuffled
    A -> B  PSI_RESULT  positions in B's list whose a * (b * H(y)) matched

The cardinality variant shuffles B's re-blinded points and omits the result
frame, so A learns only the count and B learns nothing beyond set sizes.
"""
from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass, field

import numpy as np
from nacl.bindings import crypto_scalarmult
from nacl.exceptions import RuntimeError as NaClRuntimeError

from fedgbm.errors import DataError, ProtocolError
from fedgbm.protocol.frames import MsgType, pack_u32, unpack_u32

POINT_BYTES = 32
MAX_ID_BYTES = 64
_P = (1 << 255) - 19
_DOMAIN = b"fedgbm/psi/v1"


def canonical_ids(ids) -> list[bytes]:
    """Deduplicate and sort ids; ``str`` ids are UTF-8 encoded."""
    out = set()
    for x in ids:
        b = x.encode() if isinstance(x, str) else bytes(x)
        if len(b) > MAX_ID_BYTES:
            raise DataError(f"id longer than {MAX_ID_BYTES} bytes")
        out.add(b)
    return sorted(out)


def new_key(seed: int | None = None) -> bytes:
    if seed is None:
        return secrets.token_bytes(32)
    return hashlib.sha256(b"fedgbm/psi-key" + seed.to_bytes(16, "big", signed=True)).digest()


def hash_to_point(x: bytes, domain: bytes = _DOMAIN) -> bytes:
    counter = 0
    while True:
        d = bytearray(hashlib.sha256(domain + counter.to_bytes(1, "big") + x).digest())
        d[31] &= 0x7F
        if int.from_bytes(d, "little") < _P:
            return bytes(d)
        counter += 1


def _check_point(pt: bytes) -> None:
    if len(pt) != POINT_BYTES or pt[31] & 0x80 or int.from_bytes(pt, "little") >= _P:
        raise ProtocolError("malformed group element")


def _mul(key: bytes, pt: bytes) -> bytes:
    try:
        return crypto_scalarmult(key, pt)
    except NaClRuntimeError:
        raise ProtocolError("group element of low order") from None


def _permutation(n: int, seed: int | None) -> np.ndarray:
    if seed is None:
        seed = secrets.randbits(64)
    return np.random.default_rng(seed).permutation(n)


@dataclass
class BlindedSet:
    points: list[bytes]
    blinding_key_fingerprint: str
    # local only: order[i] is the source index of points[i]
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def __len__(self) -> int:
        return len(self.points)

    def to_bytes(self) -> bytes:
        return b"".join(self.points)


def key_fingerprint(key: bytes) -> str:
    return hashlib.sha256(b"fp" + key).hexdigest()[:16]


def blind(secret_key: bytes, ids, shuffle_seed: int | None = None) -> BlindedSet:
    """Hash every id to the curve, multiply by ``secret_key`` and shuffle."""
    ids = list(ids)
    order = _permutation(len(ids), shuffle_seed)
    pts = [_mul(secret_key, hash_to_point(ids[i])) for i in order]
    return BlindedSet(pts, key_fingerprint(secret_key), order)


def double_blind(secret_key: bytes, peer: BlindedSet | list[bytes]) -> BlindedSet:
    """Apply ``secret_key`` to already blinded points, keeping their order."""
    pts = peer.points if isinstance(peer, BlindedSet) else list(peer)
    for p in pts:
        _check_point(p)
    return BlindedSet([_mul(secret_key, p) for p in pts], key_fingerprint(secret_key),
                      np.arange(len(pts)))


def split_points(data: bytes) -> list[bytes]:
    if len(data) % POINT_BYTES:
        raise ProtocolError("point section is not a whole number of elements")
    pts = [data[i:i + POINT_BYTES] for i in range(0, len(data), POINT_BYTES)]
    for p in pts:
        _check_point(p)
    return pts


# -- sessions ------------------------------------------------------------------

def psi_session(role: str, ids, channel, key: bytes | None = None,
                shuffle_seed: int | None = None, domain: str = "ids") -> list[bytes]:
    """Run the intersection protocol; both roles return ``sorted(I_A & I_B)``."""
    ids = canonical_ids(ids)
    key = key or new_key()
    if role == "A":
        offer = blind(key, ids, shuffle_seed)
        channel.send_message(MsgType.PSI_OFFER, {"domain": domain, "count": len(offer)},
                             points=offer.to_bytes())
        meta, sec = channel.recv_message(MsgType.PSI_REPLY)
        if meta.get("domain") != domain:
            raise ProtocolError("PSI domain mismatch")
        mine = split_points(sec["double"])
        theirs = split_points(sec["points"])
        if len(mine) != len(offer):
            raise ProtocolError("PSI reply size mismatch")
        theirs2 = double_blind(key, theirs).points
        lookup = {p: i for i, p in enumerate(mine)}
        matched_b, matched_a = [], []
        for j, p in enumerate(theirs2):
            i = lookup.get(p)
            if i is not None:
                matched_b.append(j)
                matched_a.append(int(offer.order[i]))
        channel.send_message(MsgType.PSI_RESULT, {"domain": domain}, positions=pack_u32(sorted(matched_b)))
        return sorted(ids[i] for i in matched_a)
    if role == "B":
        meta, sec = channel.recv_message(MsgType.PSI_OFFER)
        if meta.get("domain") != domain:
            raise ProtocolError("PSI domain mismatch")
        theirs = split_points(sec["points"])
        doubled = double_blind(key, theirs)
        mine = blind(key, ids, shuffle_seed)
        channel.send_message(MsgType.PSI_REPLY, {"domain": domain},
                             double=doubled.to_bytes(), points=mine.to_bytes())
        _, sec = channel.recv_message(MsgType.PSI_RESULT)
        pos = unpack_u32(sec["positions"])
        if pos.size and (pos.max() >= len(mine) or np.unique(pos).size != pos.size):
            raise ProtocolError("PSI result positions out of range")
        return sorted(ids[int(mine.order[j])] for j in pos)
    raise ValueError(f"role must be 'A' or 'B', got {role!r}")


def psi_cardinality_session(role: str, ids, channel, key: bytes | None = None,
                            shuffle_seed: int | None = None) -> int | None:
    """A learns ``|I_A & I_B|``; B returns ``None``."""
    ids = canonical_ids(ids)
    key = key or new_key()
    if role == "A":
        offer = blind(key, ids, shuffle_seed)
        channel.send_message(MsgType.PSI_OFFER, {"domain": "cardinality", "count": len(offer)},
                             points=offer.to_bytes())
        _, sec = channel.recv_message(MsgType.PSI_REPLY)
        mine = set(split_points(sec["double"]))
        theirs2 = double_blind(key, split_points(sec["points"])).points
        return sum(1 for p in theirs2 if p in mine)
    if role == "B":
        meta, sec = channel.recv_message(MsgType.PSI_OFFER)
        if meta.get("domain") != "cardinality":
            raise ProtocolError("PSI domain mismatch")
        doubled = double_blind(key, split_points(sec["points"])).points
        perm = _permutation(len(doubled), None if shuffle_seed is None else shuffle_seed + 1)
        mine = blind(key, ids, shuffle_seed)
        channel.send_message(MsgType.PSI_REPLY, {"domain": "cardinality"},
                             double=b"".join(doubled[i] for i in perm), points=mine.to_bytes())
        return None
    raise ValueError(f"role must be 'A' or 'B', got {role!r}")
