# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: mixture likelihood/gradients, pmf tables, range coder.

Same API as ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, expm1, tanh, fmax
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int32_t, int64_t
from libc.stdlib cimport malloc, realloc, free

from .errors import CodecError

cnp.import_array()

cdef enum:
    MAXK = 64
cdef int CDF_BITS = 32
CDF_TOTAL = 1 << 32
# 56-bit range: the carry still fits in a 64-bit low, and range >> CDF_BITS
# keeps at least 16 bits of precision
cdef uint64_t TOP = 1ULL << 48
cdef uint64_t RANGE_MAX = (1ULL << 56) - 1


cdef inline void _sig_pair(double x, double* s, double* ns) noexcept nogil:
    # sigma(x) and sigma(-x), each to full relative precision
    cdef double t
    if x >= 0:
        t = exp(-x)
        s[0] = 1.0 / (1.0 + t)
        ns[0] = t * s[0]
    else:
        t = exp(x)
        ns[0] = 1.0 / (1.0 + t)
        s[0] = t * ns[0]


def mixture_nll_grad(k, logits, mu, log_s, double log_floor, bint want_grad=True):
    cdef const int64_t[:] kv = np.ascontiguousarray(k, dtype=np.int64)
    cdef const double[:, :] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const double[:, :] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, :] ls = np.ascontiguousarray(log_s, dtype=np.float64)
    cdef Py_ssize_t n = z.shape[0], K = z.shape[1], i, j
    if K > MAXK:
        raise ValueError("at most 64 mixture components supported")
    nll_arr = np.empty(n, dtype=np.float64)
    cdef double[:] nll = nll_arr
    gz_arr = np.zeros((n if want_grad else 0, K), dtype=np.float64)
    gm_arr = np.zeros_like(gz_arr)
    gl_arr = np.zeros_like(gz_arr)
    cdef double[:, :] gz = gz_arr
    cdef double[:, :] gm = gm_arr
    cdef double[:, :] gl = gl_arr
    cdef double w[MAXK]
    cdef double q[MAXK]
    cdef double dmu[MAXK]
    cdef double dls[MAXK]
    cdef double zmax, zsum, total, inv, a, b, sa, sna, sb, snb, p, ra, rb, r
    cdef double floor_p = exp(log_floor)
    cdef int64_t kk
    with nogil:
        for i in range(n):
            kk = kv[i]
            zmax = z[i, 0]
            for j in range(1, K):
                if z[i, j] > zmax:
                    zmax = z[i, j]
            zsum = 0.0
            for j in range(K):
                w[j] = exp(z[i, j] - zmax)
                zsum = zsum + w[j]
            total = 0.0
            for j in range(K):
                w[j] = w[j] / zsum
                inv = exp(-ls[i, j])
                a = (kk + 0.5 - m[i, j]) * inv
                b = (kk - 0.5 - m[i, j]) * inv
                if kk == 0:
                    _sig_pair(a, &sa, &sna)
                    p = sa
                    dmu[j] = -sna * inv
                    dls[j] = -sna * a
                elif kk == 255:
                    _sig_pair(b, &sb, &snb)
                    p = snb
                    dmu[j] = sb * inv
                    dls[j] = sb * b
                else:
                    _sig_pair(a, &sa, &sna)
                    _sig_pair(b, &sb, &snb)
                    if b >= 0:
                        p = snb - sna
                    elif a <= 0:
                        p = sa - sb
                    else:
                        p = 1.0 - sna - sb
                    if p > 1e-300 or p != p:
                        ra = sa * sna / p
                        rb = sb * snb / p
                        dmu[j] = -(ra - rb) * inv
                        dls[j] = -(ra * a - rb * b)
                if p > 1e-300 or p != p:  # NaN must reach the caller, not the floor
                    q[j] = w[j] * p
                else:
                    # negligible next to the 1e-12 floor on the mixture
                    q[j] = 0.0
                    dmu[j] = 0.0
                    dls[j] = 0.0
                total = total + q[j]
            if total < floor_p:
                nll[i] = -log_floor
                continue
            nll[i] = -log(total)
            if want_grad:
                for j in range(K):
                    r = q[j] / total
                    gz[i, j] = w[j] - r
                    gm[i, j] = -r * dmu[j]
                    gl[i, j] = -r * dls[j]
    if not want_grad:
        return nll_arr, None
    return nll_arr, (gz_arr, gm_arr, gl_arr)


cdef inline double _sigmoid(double x) noexcept nogil:
    return 1.0 / (1.0 + exp(-x))


def mixture_pmf_table(logits, mu, log_s):
    cdef const double[:, :] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const double[:, :] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, :] ls = np.ascontiguousarray(log_s, dtype=np.float64)
    cdef Py_ssize_t n = z.shape[0], K = z.shape[1], i, j, e
    if K > MAXK:
        raise ValueError("at most 64 mixture components supported")
    out_arr = np.empty((n, 256), dtype=np.float64)
    cdef double[:, :] out = out_arr
    cdef double w[MAXK]
    cdef double inv[MAXK]
    cdef double cdf[255]
    cdef double zmax, zsum, c, x, prev
    with nogil:
        for i in range(n):
            zmax = z[i, 0]
            for j in range(1, K):
                if z[i, j] > zmax:
                    zmax = z[i, j]
            zsum = 0.0
            for j in range(K):
                w[j] = exp(z[i, j] - zmax)
                zsum = zsum + w[j]
            for j in range(K):
                w[j] = w[j] / zsum
                inv[j] = exp(-ls[i, j])
            for e in range(255):
                cdf[e] = 0.0
            for j in range(K):
                e = 0
                while e < 255:
                    x = (e + 0.5 - m[i, j]) * inv[j]
                    if x > 40.0:
                        break
                    if x > -50.0:
                        cdf[e] = cdf[e] + w[j] * _sigmoid(x)
                    e = e + 1
                # saturated tail: sigmoid == 1 to double precision
                while e < 255:
                    cdf[e] = cdf[e] + w[j]
                    e = e + 1
            out[i, 0] = cdf[0]
            prev = cdf[0]
            for e in range(1, 255):
                c = cdf[e] - prev
                out[i, e] = c if c > 0.0 else 0.0
                prev = cdf[e]
            c = 1.0 - cdf[254]
            out[i, 255] = c if c > 0.0 else 0.0
    return out_arr


cdef class RangeEncoder:
    """Carry-propagating range coder (56-bit range, 32-bit frequency tables)."""
    cdef uint64_t low
    cdef uint64_t rng
    cdef uint32_t cache
    cdef uint64_t cache_size
    cdef uint8_t* buf
    cdef Py_ssize_t size, cap
    cdef bint first

    def __cinit__(self):
        self.low = 0
        self.rng = RANGE_MAX
        self.cache = 0
        self.cache_size = 1
        self.cap = 4096
        self.size = 0
        self.first = True
        self.buf = <uint8_t*>malloc(self.cap)
        if self.buf == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.buf)

    cdef int _put(self, uint32_t byte) except -1:
        cdef uint8_t* nb
        if self.first:
            self.first = False
            return 0
        if self.size == self.cap:
            nb = <uint8_t*>realloc(self.buf, self.cap * 2)
            if nb == NULL:
                raise MemoryError()
            self.buf = nb
            self.cap *= 2
        self.buf[self.size] = <uint8_t>(byte & 0xFF)
        self.size += 1
        return 0

    cdef int _shift_low(self) except -1:
        cdef uint32_t carry, temp
        if self.low < (0xFFULL << 48) or self.low > RANGE_MAX:
            carry = <uint32_t>(self.low >> 56)
            temp = self.cache
            while True:
                self._put(temp + carry)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = <uint32_t>((self.low >> 48) & 0xFF)
        self.cache_size += 1
        self.low = (self.low & ((1ULL << 48) - 1)) << 8
        return 0

    def encode(self, symbols, cdfs):
        cdef const int64_t[:] sv = np.ascontiguousarray(np.asarray(symbols).reshape(-1), dtype=np.int64)
        cdef const int64_t[:, :] cv = np.ascontiguousarray(cdfs, dtype=np.int64)
        if cv.shape[0] != sv.shape[0] or cv.shape[1] != 257:
            raise ValueError("cdfs must have shape (n_symbols, 257)")
        cdef Py_ssize_t i
        cdef int64_t s
        cdef uint64_t start, size, r
        for i in range(sv.shape[0]):
            s = sv[i]
            if s < 0 or s > 255:
                raise ValueError("symbol out of range")
            start = <uint64_t>cv[i, s]
            size = <uint64_t>cv[i, s + 1] - start
            if size == 0:
                raise ValueError("zero-frequency symbol")
            r = self.rng >> CDF_BITS
            self.low += r * start
            self.rng = r * size
            while self.rng < TOP:
                self.rng = self.rng << 8
                self._shift_low()

    def finish(self):
        for _ in range(8):
            self._shift_low()
        return bytes(self.buf[:self.size])


cdef class RangeDecoder:
    cdef bytes data
    cdef const uint8_t* ptr
    cdef Py_ssize_t n, pos
    cdef uint64_t rng, code

    def __cinit__(self, data):
        self.data = bytes(data)
        self.ptr = self.data
        self.n = len(self.data)
        self.pos = 0
        self.rng = RANGE_MAX
        self.code = 0
        for _ in range(7):
            self.code = (self.code << 8) | self._next()

    cdef uint32_t _next(self) except? 0xFFFFFFFF:
        if self.pos >= self.n:
            raise CodecError("range-coded payload is truncated")
        self.pos += 1
        return self.ptr[self.pos - 1]

    @property
    def bytes_consumed(self):
        return self.pos

    def decode(self, cdfs):
        cdef const int64_t[:, :] cv = np.ascontiguousarray(cdfs, dtype=np.int64)
        if cv.shape[1] != 257:
            raise ValueError("cdfs must have shape (n_symbols, 257)")
        out_arr = np.empty(cv.shape[0], dtype=np.int32)
        cdef int32_t[:] out = out_arr
        cdef Py_ssize_t i
        cdef int lo, hi, mid
        cdef uint64_t r, v, start
        for i in range(cv.shape[0]):
            r = self.rng >> CDF_BITS
            v = self.code // r
            if v >= (1ULL << CDF_BITS):
                raise CodecError("range decoder out of bounds: corrupt payload")
            lo = 0
            hi = 256
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if <uint64_t>cv[i, mid] > v:
                    hi = mid
                else:
                    lo = mid
            start = <uint64_t>cv[i, lo]
            self.code -= r * start
            self.rng = r * (<uint64_t>cv[i, lo + 1] - start)
            while self.rng < TOP:
                self.code = (self.code << 8) | self._next()
                self.rng = self.rng << 8
            out[i] = lo
        return out_arr


def dense_ordered(x, w, b):
    """float32 ``x @ w + b`` summed over inputs in ascending order for every row."""
    cdef const float[:, :] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const float[:, :] wv = np.ascontiguousarray(w, dtype=np.float32)
    cdef const float[:] bv = np.ascontiguousarray(b, dtype=np.float32)
    cdef Py_ssize_t M = xv.shape[0], D = xv.shape[1], H = wv.shape[1]
    if wv.shape[0] != D or bv.shape[0] != H:
        raise ValueError("dense_ordered: shape mismatch")
    out_arr = np.empty((M, H), dtype=np.float32)
    cdef float[:, :] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef float xk
    with nogil:
        for i in range(M):
            for j in range(H):
                out[i, j] = bv[j]
            for k in range(D):
                xk = xv[i, k]
                for j in range(H):
                    out[i, j] = out[i, j] + xk * wv[k, j]
    return out_arr
