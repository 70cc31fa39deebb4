"""Pure numpy / Python implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` exactly in API; selected by ``kernels`` when the
compiled module is unavailable.
"""
from __future__ import annotations

import numpy as np

from .errors import CodecError

CDF_BITS = 32
CDF_TOTAL = 1 << CDF_BITS
_TOP = 1 << 48
_RANGE_MAX = (1 << 56) - 1


def _logsig(x):
    return -np.logaddexp(0.0, -x)


def _log_expm1(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 1.0, x + np.log1p(-np.exp(-x)), np.log(np.expm1(np.minimum(x, 1.0))))


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def component_log_probs(k, mu, log_s):
    """Per-component log bin mass, shape ``(n, K)``; plus the pieces gradients need."""
    k = np.asarray(k, dtype=np.float64)[:, None]
    inv = np.exp(-log_s)
    a = (k + 0.5 - mu) * inv
    b = (k - 0.5 - mu) * inv
    ls_a, ls_na = _logsig(a), _logsig(-a)
    ls_b, ls_nb = _logsig(b), _logsig(-b)
    interior = ls_b + ls_na + _log_expm1(inv)
    logp = np.where(k == 0, ls_a, np.where(k == 255, ls_nb, interior))
    return logp, (inv, a, b, ls_a, ls_na, ls_b, ls_nb)


def mixture_nll_grad(k, logits, mu, log_s, log_floor, want_grad=True):
    """Floored negative log-likelihood of pixel values ``k`` and its gradients.

    Returns ``nll`` of shape ``(n,)`` and, if requested, gradients w.r.t.
    ``logits``, ``mu`` and ``log_s`` (each ``(n, K)``). Rows whose
    probability falls below the floor get zero gradient.
    """
    k = np.asarray(k, dtype=np.int64)
    logp, (inv, a, b, ls_a, ls_na, ls_b, ls_nb) = component_log_probs(k, mu, log_s)
    logw = logits - _logsumexp(logits)[:, None]
    lpj = logw + logp
    total = _logsumexp(lpj)
    floored = total < log_floor
    nll = np.where(floored, -log_floor, -total)
    if not want_grad:
        return nll, None
    resp = np.exp(lpj - total[:, None])
    w = np.exp(logw)
    kk = k[:, None]
    ra = np.exp(ls_a + ls_na - logp)
    rb = np.exp(ls_b + ls_nb - logp)
    s_na = np.exp(ls_na)  # sigma(-a)
    s_b = np.exp(ls_b)    # sigma(b)
    dmu = np.where(kk == 0, -s_na * inv, np.where(kk == 255, s_b * inv, -(ra - rb) * inv))
    dls = np.where(kk == 0, -s_na * a, np.where(kk == 255, s_b * b, -(ra * a - rb * b)))
    keep = (~floored)[:, None]
    g_logits = np.where(keep, w - resp, 0.0)
    g_mu = np.where(keep, -resp * dmu, 0.0)
    g_ls = np.where(keep, -resp * dls, 0.0)
    return nll, (g_logits, g_mu, g_ls)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mixture_pmf_table(logits, mu, log_s, chunk_elems=1 << 22):
    """256-bin probability table for each row, via the mixture CDF at bin edges."""
    n, K = logits.shape
    out = np.empty((n, 256), dtype=np.float64)
    w = np.exp(logits - _logsumexp(logits)[:, None])
    inv = np.exp(-log_s)
    edges = np.arange(255, dtype=np.float64) + 0.5
    step = max(1, chunk_elems // (255 * K))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        x = (edges[None, None, :] - mu[lo:hi, :, None]) * inv[lo:hi, :, None]
        cdf = np.einsum("nk,nke->ne", w[lo:hi], _sigmoid(x))
        block = out[lo:hi]
        block[:, 0] = cdf[:, 0]
        block[:, 1:255] = np.diff(cdf, axis=1)
        block[:, 255] = 1.0 - cdf[:, 254]
    np.maximum(out, 0.0, out=out)
    return out


class RangeEncoder:
    """Carry-propagating range coder (56-bit range, 32-bit frequency tables)."""

    def __init__(self):
        self.low = 0
        self.range = _RANGE_MAX
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._first = True

    def _put(self, byte):
        if self._first:
            self._first = False  # leading byte is always zero
        else:
            self.out.append(byte & 0xFF)

    def _shift_low(self):
        if self.low < (0xFF << 48) or self.low > _RANGE_MAX:
            carry = self.low >> 56
            temp = self.cache
            while True:
                self._put(temp + carry)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 48) & 0xFF
        self.cache_size += 1
        self.low = (self.low & ((1 << 48) - 1)) << 8

    def encode(self, symbols, cdfs):
        symbols = np.asarray(symbols).reshape(-1).tolist()
        cdfs = np.asarray(cdfs)
        if cdfs.shape != (len(symbols), 257):
            raise ValueError("cdfs must have shape (n_symbols, 257)")
        table = cdfs.tolist()
        for s, cdf in zip(symbols, table):
            start = cdf[s]
            size = cdf[s + 1] - start
            r = self.range >> CDF_BITS
            self.low += r * start
            self.range = r * size
            while self.range < _TOP:
                self.range = (self.range << 8) & _RANGE_MAX
                self._shift_low()

    def finish(self) -> bytes:
        for _ in range(8):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = _RANGE_MAX
        self.code = 0
        for _ in range(7):
            self.code = (self.code << 8) | self._next()

    def _next(self):
        if self.pos >= len(self.data):
            raise CodecError("range-coded payload is truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    @property
    def bytes_consumed(self) -> int:
        return self.pos

    def decode(self, cdfs) -> np.ndarray:
        cdfs = np.asarray(cdfs)
        if cdfs.ndim != 2 or cdfs.shape[1] != 257:
            raise ValueError("cdfs must have shape (n_symbols, 257)")
        out = np.empty(cdfs.shape[0], dtype=np.int32)
        for i, cdf in enumerate(cdfs.tolist()):
            r = self.range >> CDF_BITS
            v = self.code // r
            if v >= CDF_TOTAL:
                raise CodecError("range decoder out of bounds: corrupt payload")
            lo, hi = 0, 256
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if cdf[mid] > v:
                    hi = mid
                else:
                    lo = mid
            start = cdf[lo]
            self.code -= r * start
            self.range = r * (cdf[lo + 1] - start)
            while self.range < _TOP:
                self.code = ((self.code << 8) | self._next()) & _RANGE_MAX
                self.range = (self.range << 8) & _RANGE_MAX
            out[i] = lo
        return out


def dense_ordered(x, w, b):
    """``x @ w + b`` accumulated one input feature at a time (batch-invariant)."""
    acc = np.broadcast_to(b, (x.shape[0], b.shape[0])).copy()
    for k in range(x.shape[1]):
        acc += x[:, k:k + 1] * w[k]
    return acc
