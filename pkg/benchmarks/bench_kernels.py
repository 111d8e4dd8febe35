#!/usr/bin/env python3
"""Compiled vs pure-Python kernels.

Times the three hot loops (plaintext histograms, homomorphic per-bin sums,
batched encryption) under each available implementation and checks that they
return identical results before reporting.

    python3 benchmarks/bench_kernels.py [--n 20000] [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import secrets
import timeit

import numpy as np

from fedgbm import kernels
from fedgbm.phe import keygen


def cases(n: int, bits: int, seed: int):
    rng = np.random.default_rng(seed)
    kp = keygen(bits, seed)
    pk, sk = kp.public_key, kp.private_key
    n_features, max_bins = 20, 64
    binned = np.ascontiguousarray(rng.integers(0, max_bins, size=(n, n_features), dtype=np.uint8))
    g = rng.integers(-(1 << 40), 1 << 40, size=n, dtype=np.int64)
    h = rng.integers(0, 1 << 38, size=n, dtype=np.int64)
    rows = np.sort(rng.choice(n, size=n // 2, replace=False))

    n_ct = max(n // 10, 10)
    raws = [int(x) % pk.n for x in g[:n_ct]]
    exps = [secrets.randbits(pk.exp_bits) for _ in raws]
    ref = kernels.implementation("python").ObfuscatedEncryptor(pk.n, pk.hs, pk.exp_bits, sk.p, sk.q)
    cts = np.frombuffer(ref.encrypt(raws, exps), dtype=np.uint8).reshape(n_ct, -1)
    cbinned = np.ascontiguousarray(binned[:n_ct, :10])
    crows = np.arange(n_ct)
    n_bins = np.full(10, max_bins, dtype=np.int32)
    default = np.zeros(10, dtype=np.int32)

    return {
        "histograms": (f"{n} rows x {n_features} features", lambda m: m.histograms(
            binned, rows, g, h, max_bins)),
        "cipher_bin_sums": (f"{n_ct} ciphertexts x 10 features", lambda m: m.cipher_bin_sums(
            cts, cbinned, crows, n_bins, default, pk.n2, False)),
        "encrypt": (f"{n_ct} values, CRT", lambda m: m.ObfuscatedEncryptor(
            pk.n, pk.hs, pk.exp_bits, sk.p, sk.q).encrypt(raws, exps)),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description="compiled vs pure-Python kernel timings")
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--bits", type=int, default=512, choices=(512, 1024, 2048))
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", dest="json_path", default=None)
    args = ap.parse_args(argv)

    impls = {name: kernels.implementation(name) for name in kernels.available()}
    results = []
    print(f"{'kernel':<16} {'workload':<32} " + " ".join(f"{n:>12}" for n in impls) + "   speedup")
    for kernel, (desc, fn) in cases(args.n, args.bits, args.seed).items():
        outs, best = {}, {}
        for name, mod in impls.items():
            outs[name] = fn(mod)
            best[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        ref = outs["python"]
        if not all(same(ref, o) for o in outs.values()):
            raise SystemExit(f"{kernel}: implementations disagree")
        speedup = best["python"] / best["cython"] if "cython" in best else float("nan")
        print(f"{kernel:<16} {desc:<32} " + " ".join(f"{best[n] * 1e3:>10.2f}ms" for n in impls)
              + f"   {speedup:6.1f}x")
        results.append({"kernel": kernel, "workload": desc, "seconds": best, "speedup": speedup})
    if args.json_path:
        with open(args.json_path, "w") as fh:
            json.dump({"n": args.n, "bits": args.bits, "results": results}, fh, indent=1)


if __name__ == "__main__":
    main()
