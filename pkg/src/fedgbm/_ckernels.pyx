# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels (Cython + libgmp).

Same functions and results as :mod:`fedgbm._pykernels`. Big integers never
cross the boundary as Python objects inside loops: ciphertexts arrive as
fixed-width big-endian byte rows and are imported into GMP once.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.string cimport memset, memcpy

cnp.import_array()

NAME = "cython"


cdef extern from "gmp.h":
    ctypedef struct __mpz_struct:
        pass
    ctypedef __mpz_struct* mpz_ptr
    void mpz_init(mpz_ptr)
    void mpz_clear(mpz_ptr)
    void mpz_set(mpz_ptr, mpz_ptr)
    void mpz_set_ui(mpz_ptr, unsigned long)
    void mpz_add(mpz_ptr, mpz_ptr, mpz_ptr)
    void mpz_add_ui(mpz_ptr, mpz_ptr, unsigned long)
    void mpz_sub(mpz_ptr, mpz_ptr, mpz_ptr)
    void mpz_mul(mpz_ptr, mpz_ptr, mpz_ptr)
    void mpz_mod(mpz_ptr, mpz_ptr, mpz_ptr)
    int mpz_invert(mpz_ptr, mpz_ptr, mpz_ptr)
    int mpz_sgn(mpz_ptr)
    size_t mpz_sizeinbase(mpz_ptr, int)
    void mpz_import(mpz_ptr, size_t, int, size_t, int, size_t, const void*)
    void* mpz_export(void*, size_t*, int, size_t, int, size_t, mpz_ptr)


cdef class _MpzArray:
    """Owned block of initialised mpz values."""
    cdef __mpz_struct* data
    cdef Py_ssize_t size

    def __cinit__(self, Py_ssize_t size):
        cdef Py_ssize_t i
        self.size = size
        self.data = <__mpz_struct*> malloc(max(size, 1) * sizeof(__mpz_struct))
        if self.data == NULL:
            raise MemoryError()
        for i in range(size):
            mpz_init(&self.data[i])

    def __dealloc__(self):
        cdef Py_ssize_t i
        if self.data != NULL:
            for i in range(self.size):
                mpz_clear(&self.data[i])
            free(self.data)

    cdef inline mpz_ptr at(self, Py_ssize_t i):
        return &self.data[i]


cdef void _import_bytes(mpz_ptr dst, const unsigned char* src, size_t width):
    mpz_import(dst, width, 1, 1, 1, 0, src)


cdef void _export_fixed(unsigned char* dst, mpz_ptr x, size_t width):
    cdef size_t count = 0
    cdef size_t nbytes
    memset(dst, 0, width)
    if mpz_sgn(x) == 0:
        return
    nbytes = (mpz_sizeinbase(x, 2) + 7) // 8
    if nbytes > width:
        raise OverflowError("value wider than fixed width")
    mpz_export(dst + (width - nbytes), &count, 1, 1, 1, 0, x)


cdef void _set_pyint(mpz_ptr dst, object value):
    cdef bytes raw
    cdef Py_ssize_t nbytes
    if value < 0:
        raise ValueError("negative value")
    nbytes = (value.bit_length() + 7) // 8
    if nbytes == 0:
        mpz_set_ui(dst, 0)
        return
    raw = value.to_bytes(nbytes, "big")
    mpz_import(dst, nbytes, 1, 1, 1, 0, <const unsigned char*> raw)


cdef object _get_pyint(mpz_ptr x):
    cdef size_t width
    if mpz_sgn(x) == 0:
        return 0
    width = (mpz_sizeinbase(x, 2) + 7) // 8
    buf = bytearray(width)
    cdef unsigned char* p = buf
    _export_fixed(p, x, width)
    return int.from_bytes(buf, "big")


def histograms(const unsigned char[:, ::1] binned, rows, const cnp.int64_t[::1] g,
               const cnp.int64_t[::1] h, int max_bins):
    cdef cnp.int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef Py_ssize_t n_features = binned.shape[1]
    cdef Py_ssize_t k = r.shape[0]
    G_arr = np.zeros((n_features, max_bins), dtype=np.int64)
    H_arr = np.zeros((n_features, max_bins), dtype=np.int64)
    C_arr = np.zeros((n_features, max_bins), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] G = G_arr
    cdef cnp.int64_t[:, ::1] H = H_arr
    cdef cnp.int64_t[:, ::1] C = C_arr
    cdef Py_ssize_t i, f, row
    cdef unsigned char b
    cdef cnp.int64_t gv, hv
    with nogil:
        for i in range(k):
            row = r[i]
            gv = g[row]
            hv = h[row]
            for f in range(n_features):
                b = binned[row, f]
                G[f, b] += gv
                H[f, b] += hv
                C[f, b] += 1
    return G_arr, H_arr, C_arr


def cipher_bin_sums(const unsigned char[:, ::1] cts, const unsigned char[:, ::1] binned,
                    rows, n_bins, default_bin, modulus, bint additive):
    cdef cnp.int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef cnp.int32_t[::1] nb = np.ascontiguousarray(n_bins, dtype=np.int32)
    cdef cnp.int32_t[::1] db = np.ascontiguousarray(default_bin, dtype=np.int32)
    cdef Py_ssize_t width = cts.shape[1]
    cdef Py_ssize_t n_features = binned.shape[1]
    cdef Py_ssize_t k = r.shape[0]
    cdef Py_ssize_t max_bins = 0
    cdef Py_ssize_t i, f, b, d
    for f in range(n_features):
        if nb[f] > max_bins:
            max_bins = nb[f]
    out_arr = np.zeros((n_features, max_bins, width), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] out = out_arr

    cdef _MpzArray vals = _MpzArray(k)
    cdef _MpzArray acc = _MpzArray(max_bins)
    cdef _MpzArray tmp = _MpzArray(4)
    cdef mpz_ptr M = tmp.at(0)
    cdef mpz_ptr total = tmp.at(1)
    cdef mpz_ptr others = tmp.at(2)
    cdef mpz_ptr t = tmp.at(3)
    _set_pyint(M, modulus)

    for i in range(k):
        _import_bytes(vals.at(i), &cts[r[i], 0], width)

    mpz_set_ui(total, 0 if additive else 1)
    for i in range(k):
        if additive:
            mpz_add(total, total, vals.at(i))
        else:
            mpz_mul(total, total, vals.at(i))
        mpz_mod(total, total, M)

    for f in range(n_features):
        d = db[f]
        for b in range(max_bins):
            mpz_set_ui(acc.at(b), 0 if additive else 1)
        for i in range(k):
            b = binned[r[i], f]
            if b != d:
                if additive:
                    mpz_add(acc.at(b), acc.at(b), vals.at(i))
                else:
                    mpz_mul(acc.at(b), acc.at(b), vals.at(i))
                mpz_mod(acc.at(b), acc.at(b), M)
        mpz_set_ui(others, 0 if additive else 1)
        for b in range(nb[f]):
            if b != d:
                if additive:
                    mpz_add(others, others, acc.at(b))
                else:
                    mpz_mul(others, others, acc.at(b))
                mpz_mod(others, others, M)
        if additive:
            mpz_sub(t, total, others)
        else:
            if mpz_invert(t, others, M) == 0:
                raise ArithmeticError("ciphertext not invertible")
            mpz_mul(t, total, t)
        mpz_mod(acc.at(d), t, M)
        for b in range(max_bins):
            _export_fixed(&out[f, b, 0], acc.at(b), width)
    return out_arr


cdef class _FixedBaseTable:
    """Windowed fixed-base exponentiation: base^e mod M for e < 2^exp_bits."""
    cdef _MpzArray table
    cdef _MpzArray scratch
    cdef int window
    cdef int n_windows
    cdef int per_window

    def __cinit__(self, base, modulus, int exp_bits, int window):
        cdef int i, j
        self.window = window
        self.n_windows = (exp_bits + window - 1) // window
        self.per_window = 1 << window
        self.table = _MpzArray(self.n_windows * self.per_window)
        self.scratch = _MpzArray(2)
        cdef mpz_ptr M = self.scratch.at(0)
        cdef mpz_ptr step = self.scratch.at(1)
        _set_pyint(M, modulus)
        _set_pyint(step, base % modulus)
        for i in range(self.n_windows):
            mpz_set_ui(self.table.at(i * self.per_window), 1)
            for j in range(1, self.per_window):
                mpz_mul(self.table.at(i * self.per_window + j),
                        self.table.at(i * self.per_window + j - 1), step)
                mpz_mod(self.table.at(i * self.per_window + j),
                        self.table.at(i * self.per_window + j), M)
            # step <- step^(2^window)
            mpz_mul(step, self.table.at(i * self.per_window + self.per_window - 1), step)
            mpz_mod(step, step, M)

    cdef void pow_into(self, mpz_ptr out, const unsigned char* exp_be, size_t exp_len, mpz_ptr M):
        # exp_be holds the exponent big-endian; only window == 8 is used
        cdef int i
        cdef unsigned int digit
        mpz_set_ui(out, 1)
        for i in range(self.n_windows):
            if <size_t> i >= exp_len:
                break
            digit = exp_be[exp_len - 1 - i]
            if digit:
                mpz_mul(out, out, self.table.at(i * self.per_window + digit))
                mpz_mod(out, out, M)


cdef class ObfuscatedEncryptor:
    """Batched Paillier encryption ``(1 + m*n) * hs^a mod n^2``.

    Uses 8-bit fixed-base tables for ``hs`` (mod ``p^2``/``q^2`` with CRT when
    the factorisation is supplied, else mod ``n^2``).
    """
    cdef public object n
    cdef public int width
    cdef public int exp_bits
    cdef public bint crt
    cdef _FixedBaseTable tab_p
    cdef _FixedBaseTable tab_q
    cdef _FixedBaseTable tab_n
    cdef _MpzArray k  # n, n2, p2, q2, q2_inv, scratch x4
    cdef int exp_len

    def __init__(self, n, hs, int exp_bits, p=None, q=None, int window=8):
        if window != 8:
            raise ValueError("compiled encryptor supports window=8 only")
        self.n = n
        n2 = n * n
        self.width = (n2.bit_length() + 7) // 8
        self.exp_bits = exp_bits
        self.exp_len = (exp_bits + 7) // 8
        self.crt = p is not None and q is not None
        self.k = _MpzArray(9)
        _set_pyint(self.k.at(0), n)
        _set_pyint(self.k.at(1), n2)
        if self.crt:
            p2 = p * p
            q2 = q * q
            _set_pyint(self.k.at(2), p2)
            _set_pyint(self.k.at(3), q2)
            _set_pyint(self.k.at(4), pow(q2, -1, p2))
            self.tab_p = _FixedBaseTable(hs % p2, p2, exp_bits, 8)
            self.tab_q = _FixedBaseTable(hs % q2, q2, exp_bits, 8)
        else:
            self.tab_n = _FixedBaseTable(hs, n2, exp_bits, 8)

    def obfuscator(self, a):
        cdef bytes eb = a.to_bytes(self.exp_len, "big")
        self._obf(self.k.at(5), <const unsigned char*> eb)
        return _get_pyint(self.k.at(5))

    cdef void _obf(self, mpz_ptr out, const unsigned char* eb):
        cdef mpz_ptr rp = self.k.at(6)
        cdef mpz_ptr rq = self.k.at(7)
        if self.crt:
            self.tab_p.pow_into(rp, eb, self.exp_len, self.k.at(2))
            self.tab_q.pow_into(rq, eb, self.exp_len, self.k.at(3))
            # out = rq + q2 * ((rp - rq) * q2_inv mod p2)
            mpz_sub(out, rp, rq)
            mpz_mul(out, out, self.k.at(4))
            mpz_mod(out, out, self.k.at(2))
            mpz_mul(out, out, self.k.at(3))
            mpz_add(out, out, rq)
        else:
            self.tab_n.pow_into(out, eb, self.exp_len, self.k.at(1))

    def encrypt(self, raws, exps):
        cdef Py_ssize_t count = len(raws)
        if count != len(exps):
            raise ValueError("raws and exps differ in length")
        out = bytearray(count * self.width)
        cdef unsigned char* dst = out
        cdef mpz_ptr m = self.k.at(8)
        cdef mpz_ptr r = self.k.at(5)
        cdef Py_ssize_t i
        cdef bytes eb
        for i in range(count):
            eb = exps[i].to_bytes(self.exp_len, "big")
            self._obf(r, <const unsigned char*> eb)
            _set_pyint(m, raws[i])
            mpz_mul(m, m, self.k.at(0))
            mpz_add_ui(m, m, 1)
            mpz_mul(m, m, r)
            mpz_mod(m, m, self.k.at(1))
            _export_fixed(dst + i * self.width, m, self.width)
        return bytes(out)

