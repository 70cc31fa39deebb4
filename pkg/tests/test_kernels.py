"""Compiled kernels against the pure numpy/Python fallback."""
import numpy as np
import pytest

from costgap import _pykernels, kernels
from costgap.kernels import CDF_TOTAL
from costgap.mixture import LOG_PROB_FLOOR, LOG_SCALE_MAX, LOG_SCALE_MIN

ck = pytest.importorskip("costgap._ckernels")


def _params(rng, n=3000, K=10):
    return (rng.normal(size=(n, K)) * 2, rng.uniform(-20, 280, (n, K)),
            rng.uniform(LOG_SCALE_MIN, LOG_SCALE_MAX, (n, K)))


def test_backend_selected():
    assert kernels.BACKEND == "cython"


def test_nll_grad_agree(rng):
    z, mu, ls = _params(rng)
    k = rng.integers(0, 256, z.shape[0])
    k[:20], k[20:40] = 0, 255
    a_nll, a_g = _pykernels.mixture_nll_grad(k, z, mu, ls, LOG_PROB_FLOOR)
    b_nll, b_g = ck.mixture_nll_grad(k, z, mu, ls, LOG_PROB_FLOOR)
    np.testing.assert_allclose(a_nll, b_nll, rtol=1e-11, atol=1e-11)
    for a, b in zip(a_g, b_g):
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-11)


def test_pmf_table_agree(rng):
    z, mu, ls = _params(rng, n=500)
    np.testing.assert_allclose(_pykernels.mixture_pmf_table(z, mu, ls),
                               ck.mixture_pmf_table(z, mu, ls), rtol=0, atol=1e-14)


def _cdfs(rng, n):
    freq = rng.integers(1, 500, (n, 256))
    freq = np.floor(freq / freq.sum(1, keepdims=True) * (CDF_TOTAL - 256)).astype(np.int64) + 1
    freq[:, 0] += CDF_TOTAL - freq.sum(1)
    return np.concatenate([np.zeros((n, 1), np.int64), np.cumsum(freq, 1)], 1)


@pytest.mark.parametrize("enc", [_pykernels, ck], ids=["py-enc", "c-enc"])
@pytest.mark.parametrize("dec", [_pykernels, ck], ids=["py-dec", "c-dec"])
def test_range_coder_cross_backend(rng, enc, dec):
    n = 4000
    cdfs = _cdfs(rng, n)
    sym = rng.integers(0, 256, n)
    e = enc.RangeEncoder()
    e.encode(sym[:1000], cdfs[:1000])
    e.encode(sym[1000:], cdfs[1000:])
    data = e.finish()
    d = dec.RangeDecoder(data)
    out = np.concatenate([d.decode(cdfs[:2500]), d.decode(cdfs[2500:])])
    np.testing.assert_array_equal(out, sym)
    assert d.bytes_consumed == len(data)


@pytest.mark.parametrize("mod", [_pykernels, ck], ids=["py", "c"])
def test_range_coder_extreme_tables(mod, rng):
    # one dominant symbol, all others at the minimum frequency of 1
    n = 3000
    cdfs = np.zeros((n, 257), np.int64)
    cdfs[:, 1:] = np.arange(1, 257)
    cdfs[:, 129:] += CDF_TOTAL - 256
    sym = np.where(rng.random(n) < 0.02, rng.integers(0, 256, n), 128)
    e = mod.RangeEncoder()
    e.encode(sym, cdfs)
    data = e.finish()
    np.testing.assert_array_equal(mod.RangeDecoder(data).decode(cdfs), sym)
    freq = np.diff(cdfs, axis=1)[np.arange(n), sym]
    ideal = float(np.sum(np.log2(CDF_TOTAL / freq)))
    assert ideal <= 8 * len(data) <= ideal * 1.001 + 64
