"""Additively homomorphic encryption (Paillier) with fixed-point encoding.

Plaintexts are integers mod ``n``. Reals are carried as fixed-point integers
with ``scale_bits`` fractional bits; negative values occupy the upper half of
``Z_n``. Encryption uses ``g = n + 1`` and the short-exponent obfuscator
``hs^a`` where ``hs = (-x^2)^n mod n^2`` is derived from ``n`` alone, so key
files only carry ``n`` and ``g``.

:class:`NullBackend` is an identity "cipher" used to check the protocol
against centralized training. It must be enabled explicitly.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import secrets
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import gmpy2
import numpy as np

from fedgbm import kernels
from fedgbm.errors import ConfigError, EncodingRangeError, KeyMismatchError

SUPPORTED_BITS = (512, 1024, 2048)
DEFAULT_SCALE_BITS = 40
MAX_MAGNITUDE_BITS = 60
NULL_FLAG = "--insecure-null-cipher"


# -- fixed point ----------------------------------------------------------

@dataclass(frozen=True)
class FixedPoint:
    raw: int
    scale_bits: int = DEFAULT_SCALE_BITS


def encode(x: float, n: int, scale_bits: int = DEFAULT_SCALE_BITS) -> FixedPoint:
    """Encode a real into ``Z_n``; ``|x|`` must stay below ``2**60``."""
    if not math.isfinite(x):
        raise EncodingRangeError(f"cannot encode non-finite value {x!r}")
    if abs(x) >= 2.0 ** MAX_MAGNITUDE_BITS:
        raise EncodingRangeError(f"|{x}| exceeds 2^{MAX_MAGNITUDE_BITS}")
    return FixedPoint(round(x * (1 << scale_bits)) % n, scale_bits)


def signed_raw(raw: int, n: int, scale_bits: int = DEFAULT_SCALE_BITS) -> int:
    """Map a raw residue to its signed integer, checking the magnitude cap."""
    limit = 1 << (MAX_MAGNITUDE_BITS + scale_bits)
    if raw < limit:
        return raw
    if raw >= n - limit:
        return raw - n
    raise EncodingRangeError("decoded value outside the encodable range")


def decode(fp: FixedPoint, n: int) -> float:
    return signed_raw(fp.raw, n, fp.scale_bits) / (1 << fp.scale_bits)


def encode_array(xs, n: int, scale_bits: int = DEFAULT_SCALE_BITS) -> list[int]:
    """Vector encode for ``|x| < 2**22`` (fits int64 after scaling)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size and np.max(np.abs(xs)) >= 2.0 ** (62 - scale_bits):
        raise EncodingRangeError("value too large for vector encoding")
    q = np.rint(xs * float(1 << scale_bits)).astype(np.int64)
    return [v if v >= 0 else n + v for v in q.tolist()]


def decode_signed(raws: Iterable[int], n: int, scale_bits: int = DEFAULT_SCALE_BITS) -> list[int]:
    return [signed_raw(int(r), n, scale_bits) for r in raws]


# -- keys -------------------------------------------------------------------

def _fingerprint(n: int) -> str:
    return hashlib.sha256(n.to_bytes((n.bit_length() + 7) // 8, "big")).hexdigest()[:16]


def _obfuscation_base(n: int) -> int:
    n2 = n * n
    nbytes = (n.bit_length() + 7) // 8
    stream = b""
    counter = 0
    while len(stream) < nbytes + 16:
        stream += hashlib.sha256(b"fedgbm/obfuscation-base" + n.to_bytes(nbytes, "big")
                                 + counter.to_bytes(4, "big")).digest()
        counter += 1
    x = int.from_bytes(stream, "big") % n
    h = (-x * x) % n
    return int(gmpy2.powmod(h, n, n2))


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int

    @cached_property
    def n2(self) -> int:
        return self.n * self.n

    @cached_property
    def key_id(self) -> str:
        return _fingerprint(self.n)

    @cached_property
    def hs(self) -> int:
        return _obfuscation_base(self.n)

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def exp_bits(self) -> int:
        return (self.bits + 1) // 2

    @property
    def ciphertext_width(self) -> int:
        return (self.n2.bit_length() + 7) // 8

    def to_json(self) -> dict:
        return {"n_hex": format(self.n, "x"), "g_hex": format(self.g, "x")}

    @classmethod
    def from_json(cls, obj: dict) -> "PublicKey":
        return cls(int(obj["n_hex"], 16), int(obj["g_hex"], 16))


@dataclass(frozen=True)
class PrivateKey:
    lam: int
    mu: int
    n: int
    p: int | None = None
    q: int | None = None

    @cached_property
    def key_id(self) -> str:
        return _fingerprint(self.n)

    @cached_property
    def _crt(self):
        p, q = gmpy2.mpz(self.p), gmpy2.mpz(self.q)
        p2, q2 = p * p, q * q
        g = gmpy2.mpz(self.n + 1)
        hp = gmpy2.invert((gmpy2.powmod(g, p - 1, p2) - 1) // p, p)
        hq = gmpy2.invert((gmpy2.powmod(g, q - 1, q2) - 1) // q, q)
        return p, q, p2, q2, hp, hq, gmpy2.invert(q, p)

    def raw_decrypt(self, c: int) -> int:
        if self.p is None or self.q is None:
            n = gmpy2.mpz(self.n)
            n2 = n * n
            u = gmpy2.powmod(c, self.lam, n2)
            return int((u - 1) // n * self.mu % n)
        p, q, p2, q2, hp, hq, qinv = self._crt
        mp = (gmpy2.powmod(c % p2, p - 1, p2) - 1) // p * hp % p
        mq = (gmpy2.powmod(c % q2, q - 1, q2) - 1) // q * hq % q
        return int(mq + q * ((mp - mq) * qinv % p))

    def to_json(self) -> dict:
        obj = {"lambda_hex": format(self.lam, "x"), "mu_hex": format(self.mu, "x"),
               "n_hex": format(self.n, "x")}
        if self.p is not None:
            obj["p_hex"] = format(self.p, "x")
            obj["q_hex"] = format(self.q, "x")
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PrivateKey":
        p = int(obj["p_hex"], 16) if "p_hex" in obj else None
        q = int(obj["q_hex"], 16) if "q_hex" in obj else None
        return cls(int(obj["lambda_hex"], 16), int(obj["mu_hex"], 16), int(obj["n_hex"], 16), p, q)


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    private_key: PrivateKey
    modulus_bits: int


@dataclass(frozen=True)
class CipherInt:
    value: int
    key_id: str


def _random_prime(bits: int, rng) -> int:
    while True:
        cand = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits:
            return p


def keygen(modulus_bits: int, rng_seed: int | None = None) -> KeyPair:
    """Generate a Paillier key pair; deterministic when ``rng_seed`` is given."""
    if modulus_bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported modulus size {modulus_bits}; choose one of {SUPPORTED_BITS}")
    rng = random.Random(rng_seed) if rng_seed is not None else random.SystemRandom()
    half = modulus_bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(modulus_bits - half, rng)
        n = p * q
        if p != q and n.bit_length() == modulus_bits and math.gcd(n, (p - 1) * (q - 1)) == 1:
            break
    lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
    mu = int(gmpy2.invert(lam, n))
    return KeyPair(PublicKey(n, n + 1), PrivateKey(lam, mu, n, p, q), modulus_bits)


def save_keypair(kp: KeyPair, directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pub, priv = d / "public_key.json", d / "private_key.json"
    pub.write_text(json.dumps(kp.public_key.to_json(), indent=2) + "\n")
    priv.write_text(json.dumps(kp.private_key.to_json(), indent=2) + "\n")
    return pub, priv


def load_keypair(directory) -> KeyPair:
    d = Path(directory)
    pk = PublicKey.from_json(json.loads((d / "public_key.json").read_text()))
    sk = PrivateKey.from_json(json.loads((d / "private_key.json").read_text()))
    if sk.n != pk.n:
        raise KeyMismatchError("public and private key files do not belong together")
    return KeyPair(pk, sk, pk.bits)


# -- scalar operations --------------------------------------------------------

def _randomness(pk: PublicKey, rng) -> int:
    if rng is None:
        return secrets.randbits(pk.exp_bits)
    return rng.getrandbits(pk.exp_bits)


def encrypt(pk: PublicKey, m: FixedPoint | int, rng=None) -> CipherInt:
    raw = m.raw if isinstance(m, FixedPoint) else int(m)
    if not 0 <= raw < pk.n:
        raise EncodingRangeError("plaintext outside [0, n)")
    r = gmpy2.powmod(pk.hs, _randomness(pk, rng), pk.n2)
    return CipherInt(int((1 + raw * pk.n) * r % pk.n2), pk.key_id)


def decrypt(sk: PrivateKey, c: CipherInt, scale_bits: int = DEFAULT_SCALE_BITS) -> FixedPoint:
    if c.key_id != sk.key_id:
        raise KeyMismatchError(f"ciphertext key {c.key_id} does not match private key {sk.key_id}")
    return FixedPoint(sk.raw_decrypt(c.value), scale_bits)


def _check_key(pk: PublicKey, *cs: CipherInt) -> None:
    for c in cs:
        if c.key_id != pk.key_id:
            raise KeyMismatchError(f"ciphertext key {c.key_id} does not match {pk.key_id}")


def hom_add(pk: PublicKey, c1: CipherInt, c2: CipherInt) -> CipherInt:
    _check_key(pk, c1, c2)
    return CipherInt(c1.value * c2.value % pk.n2, pk.key_id)


def hom_scale(pk: PublicKey, c: CipherInt, k: int) -> CipherInt:
    _check_key(pk, c)
    return CipherInt(int(gmpy2.powmod(c.value, k % pk.n, pk.n2)), pk.key_id)


# -- backends used by the protocol --------------------------------------------

class PaillierBackend:
    """Batch interface over a Paillier key; decryption needs the private key."""

    name = "paillier"
    additive = False

    def __init__(self, public_key: PublicKey, private_key: PrivateKey | None = None):
        self.public_key = public_key
        self.private_key = private_key
        self.key_id = public_key.key_id
        self.n = public_key.n
        self.ct_modulus = public_key.n2
        self.ct_width = public_key.ciphertext_width
        self.identity = 1
        self._encryptor = None

    @property
    def encryptor(self):
        if self._encryptor is None:
            sk = self.private_key
            self._encryptor = kernels.ObfuscatedEncryptor(
                self.n, self.public_key.hs, self.public_key.exp_bits,
                sk.p if sk else None, sk.q if sk else None)
        return self._encryptor

    def encrypt_many(self, raws: Sequence[int]) -> bytes:
        exp_bits = self.public_key.exp_bits
        exps = [secrets.randbits(exp_bits) for _ in range(len(raws))]
        return self.encryptor.encrypt(list(raws), exps)

    def decrypt_many(self, cts: Sequence[int]) -> list[int]:
        if self.private_key is None:
            raise KeyMismatchError("decryption requires the private key")
        return [self.private_key.raw_decrypt(c) for c in cts]

    def add(self, a: int, b: int) -> int:
        return a * b % self.ct_modulus

    def sub(self, a: int, b: int) -> int:
        return a * int(gmpy2.invert(b, self.ct_modulus)) % self.ct_modulus


class NullBackend:
    """Identity cipher: "ciphertexts" are the raw fixed-point residues."""

    name = "null"
    additive = True
    DEFAULT_MODULUS = (1 << 512) - 1

    def __init__(self, n: int | None = None):
        self.n = n or self.DEFAULT_MODULUS
        self.public_key = None
        self.private_key = None
        self.key_id = "null-" + _fingerprint(self.n)
        self.ct_modulus = self.n
        self.ct_width = (self.n.bit_length() + 7) // 8
        self.identity = 0

    def encrypt_many(self, raws: Sequence[int]) -> bytes:
        w = self.ct_width
        return b"".join(int(r).to_bytes(w, "big") for r in raws)

    def decrypt_many(self, cts: Sequence[int]) -> list[int]:
        return [int(c) % self.n for c in cts]

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.n

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.n


def null_cipher_backend(allow_insecure: bool = False, n: int | None = None) -> NullBackend:
    if not allow_insecure:
        raise ConfigError(f"the null cipher is insecure and requires {NULL_FLAG}")
    return NullBackend(n)


def make_backend(cipher: str, keypair: KeyPair | None = None, public_key: PublicKey | None = None,
                 allow_insecure: bool = False):
    if cipher == "null":
        return null_cipher_backend(allow_insecure)
    if cipher == "paillier":
        if keypair is not None:
            return PaillierBackend(keypair.public_key, keypair.private_key)
        if public_key is not None:
            return PaillierBackend(public_key)
        raise ConfigError("paillier backend needs a key")
    raise ConfigError(f"unknown cipher backend {cipher!r}")
