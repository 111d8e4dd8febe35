"""Pure-Python kernels.

Reference implementations of the hot loops. The compiled module
``fedgbm._ckernels`` exposes the same functions and must return
bit-identical results; ``fedgbm.kernels`` picks one at import time.
"""
from __future__ import annotations

from typing import Sequence

import gmpy2
import numpy as np

NAME = "python"


def _exact_bincount(col, weights, max_bins):
    # int64 weights split into 24-bit limbs keep every float64 partial sum exact
    lo = (weights & 0xFFFFFF).astype(np.float64)
    hi = (weights >> 24).astype(np.float64)
    s_lo = np.bincount(col, weights=lo, minlength=max_bins)[:max_bins]
    s_hi = np.bincount(col, weights=hi, minlength=max_bins)[:max_bins]
    return (s_hi.astype(np.int64) << 24) + s_lo.astype(np.int64)


def histograms(binned, rows, g, h, max_bins):
    """Per-feature gradient/hessian/count histograms over ``rows``.

    ``binned`` is a C-ordered ``(n_samples, n_features)`` uint8 matrix of bin
    indices; ``g`` and ``h`` are int64 fixed-point values indexed by sample.
    Sums are exact, so the result does not depend on accumulation order.
    """
    rows = np.asarray(rows, dtype=np.int64)
    g = np.asarray(g, dtype=np.int64)
    h = np.asarray(h, dtype=np.int64)
    n_features = binned.shape[1]
    G = np.zeros((n_features, max_bins), dtype=np.int64)
    H = np.zeros((n_features, max_bins), dtype=np.int64)
    C = np.zeros((n_features, max_bins), dtype=np.int64)
    if rows.size == 0:
        return G, H, C
    sub = binned[rows]
    gs = g[rows]
    hs = h[rows]
    for f in range(n_features):
        col = sub[:, f]
        G[f] = _exact_bincount(col, gs, max_bins)
        H[f] = _exact_bincount(col, hs, max_bins)
        C[f] = np.bincount(col, minlength=max_bins)[:max_bins]
    return G, H, C


def _to_mpz_rows(cts, rows):
    width = cts.shape[1]
    raw = cts[rows].tobytes()
    return [gmpy2.mpz(int.from_bytes(raw[i * width:(i + 1) * width], "big"))
            for i in range(len(rows))]


def cipher_bin_sums(cts, binned, rows, n_bins, default_bin, modulus, additive):
    """Homomorphic per-bin sums of ciphertexts for every feature.

    ``cts`` is ``(n_samples, width)`` big-endian ciphertext bytes. With
    ``additive`` false the group operation is multiplication mod ``modulus``
    (Paillier); otherwise addition mod ``modulus`` (null cipher). The default
    (most populated) bin of each feature is recovered as total minus the other
    bins, so only non-default entries are visited.

    Returns a ``(n_features, max_bins, width)`` uint8 array.
    """
    rows = np.asarray(rows, dtype=np.int64)
    n_bins = np.asarray(n_bins, dtype=np.int32)
    default_bin = np.asarray(default_bin, dtype=np.int32)
    width = cts.shape[1]
    n_features = binned.shape[1]
    max_bins = int(n_bins.max()) if n_features else 0
    M = gmpy2.mpz(modulus)
    ident = gmpy2.mpz(0 if additive else 1)
    vals = _to_mpz_rows(cts, rows)
    total = ident
    for v in vals:
        total = (total + v) % M if additive else (total * v) % M
    out = np.zeros((n_features, max_bins, width), dtype=np.uint8)
    sub = binned[rows] if rows.size else np.zeros((0, n_features), dtype=np.uint8)
    for f in range(n_features):
        nb = int(n_bins[f])
        d = int(default_bin[f])
        acc = [ident] * max_bins
        col = sub[:, f]
        for i in np.flatnonzero(col != d):
            b = col[i]
            acc[b] = (acc[b] + vals[i]) % M if additive else (acc[b] * vals[i]) % M
        others = ident
        for b in range(nb):
            if b != d:
                others = (others + acc[b]) % M if additive else (others * acc[b]) % M
        if additive:
            acc[d] = (total - others) % M
        else:
            acc[d] = (total * gmpy2.invert(others, M)) % M
        for b in range(max_bins):
            out[f, b] = np.frombuffer(int(acc[b]).to_bytes(width, "big"), dtype=np.uint8)
    return out


class ObfuscatedEncryptor:
    """Paillier encryption ``(1 + m*n) * hs^a mod n^2`` for batches.

    ``hs`` is the fixed obfuscation base and ``a`` a short random exponent.
    When the factors ``p`` and ``q`` are known the exponentiation runs modulo
    ``p^2`` and ``q^2`` and is recombined by CRT.
    """

    def __init__(self, n: int, hs: int, exp_bits: int, p: int | None = None,
                 q: int | None = None, window: int = 8):
        self.n = gmpy2.mpz(n)
        self.n2 = self.n * self.n
        self.hs = gmpy2.mpz(hs)
        self.exp_bits = exp_bits
        self.width = (int(self.n2).bit_length() + 7) // 8
        self.crt = p is not None and q is not None
        if self.crt:
            self.p2 = gmpy2.mpz(p) ** 2
            self.q2 = gmpy2.mpz(q) ** 2
            self.hs_p = self.hs % self.p2
            self.hs_q = self.hs % self.q2
            self.q2_inv = gmpy2.invert(self.q2, self.p2)

    def obfuscator(self, a: int):
        if self.crt:
            rp = gmpy2.powmod(self.hs_p, a, self.p2)
            rq = gmpy2.powmod(self.hs_q, a, self.q2)
            return rq + self.q2 * (((rp - rq) * self.q2_inv) % self.p2)
        return gmpy2.powmod(self.hs, a, self.n2)

    def encrypt(self, raws: Sequence[int], exps: Sequence[int]) -> bytes:
        if len(raws) != len(exps):
            raise ValueError("raws and exps differ in length")
        n, n2, width = self.n, self.n2, self.width
        out = bytearray()
        for m, a in zip(raws, exps):
            c = ((1 + gmpy2.mpz(m) * n) * self.obfuscator(a)) % n2
            out += int(c).to_bytes(width, "big")
        return bytes(out)
