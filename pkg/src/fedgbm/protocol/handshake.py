"""Session setup: version check, replay protection, config agreement, key delivery."""
from __future__ import annotations

import hashlib
import json
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path

from fedgbm.errors import ConfigMismatchError, ProtocolError, SecurityAbort
from fedgbm.phe import PublicKey
from fedgbm.protocol.frames import VERSION, MsgType

MODES = ("train", "infer")


def config_hash(config, cipher: str) -> str:
    """Digest of the parameters both parties must agree on."""
    body = {
        "iterations": config.iterations,
        "t": config.t,
        "learning_rate": config.learning_rate,
        "learning_rates": config.learning_rates,
        "batch_fraction": config.batch_fraction,
        "strategy": config.strategy,
        "bins": config.bins,
        "base_tree": config.base_tree,
        "cipher": cipher,
    }
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


class SessionRegistry:
    """Session ids a B server has accepted; optionally persisted to a file."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._seen: set[str] = set()
        if self.path and self.path.exists():
            self._seen = set(json.loads(self.path.read_text()))

    def claim(self, session_id: str) -> bool:
        with self._lock:
            if session_id in self._seen:
                return False
            self._seen.add(session_id)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.path.write_text(json.dumps(sorted(self._seen)))
            return True


@dataclass
class Session:
    session_id: str
    mode: str
    digest: str
    resume_from: int = 0
    public_key: PublicKey | None = None


def handshake_a(channel, digest: str, mode: str = "train", public_key: PublicKey | None = None,
                resume_from: int = 0, session_id: str | None = None) -> Session:
    sid = session_id or secrets.token_hex(16)
    channel.send_message(MsgType.HELLO, {"version": VERSION, "session_id": sid, "mode": mode,
                                         "resume_from": resume_from, "party": "A"})
    meta, _ = channel.recv_message(MsgType.HELLO)
    if meta.get("version") != VERSION or meta.get("session_id") != sid:
        channel.abort("VERSION", "bad HELLO reply")
        raise ProtocolError("peer HELLO does not match")
    channel.send_message(MsgType.CONFIG_HASH, {
        "hash": digest, "public_key": public_key.to_json() if public_key else None})
    meta, _ = channel.recv_message(MsgType.CONFIG_HASH)
    if meta.get("hash") != digest:
        channel.abort("CONFIG_MISMATCH", "configuration digests differ")
        raise ConfigMismatchError("peer configuration digest differs")
    return Session(sid, mode, digest, resume_from, public_key)


def handshake_b(channel, digest: str, registry: SessionRegistry | None = None,
                expect_mode: str | None = None) -> Session:
    meta, _ = channel.recv_message(MsgType.HELLO)
    if meta.get("version") != VERSION:
        channel.abort("VERSION", f"unsupported version {meta.get('version')}")
        raise ProtocolError(f"peer speaks protocol version {meta.get('version')}")
    sid = meta.get("session_id")
    mode = meta.get("mode")
    resume_from = int(meta.get("resume_from") or 0)
    if not isinstance(sid, str) or len(sid) != 32 or mode not in MODES:
        channel.abort("PROTOCOL", "malformed HELLO")
        raise ProtocolError("malformed HELLO")
    if expect_mode and mode != expect_mode:
        channel.abort("PROTOCOL", f"server expects mode {expect_mode}")
        raise ProtocolError(f"client requested mode {mode}, expected {expect_mode}")
    if registry is not None and not registry.claim(sid):
        channel.abort("REPLAY", "session id already used")
        raise SecurityAbort(f"replayed session id {sid}")
    channel.send_message(MsgType.HELLO, {"version": VERSION, "session_id": sid, "party": "B"})
    meta, _ = channel.recv_message(MsgType.CONFIG_HASH)
    if meta.get("hash") != digest:
        channel.abort("CONFIG_MISMATCH", "configuration digests differ")
        raise ConfigMismatchError("peer configuration digest differs")
    pk = PublicKey.from_json(meta["public_key"]) if meta.get("public_key") else None
    channel.send_message(MsgType.CONFIG_HASH, {"hash": digest})
    return Session(sid, mode, digest, resume_from, pk)
