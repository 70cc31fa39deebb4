"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel: time per call for each backend and the speedup.
Both backends are checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from costgap import _pykernels

try:
    from costgap import _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def mixture_inputs(rng, n, K=10):
    return (rng.integers(0, 256, n), rng.normal(size=(n, K)), rng.uniform(-10, 265, (n, K)),
            rng.uniform(np.log(0.05), np.log(64), (n, K)))


def cases(rng):
    k, z, mu, ls = mixture_inputs(rng, 20000)
    tz, tmu, tls = (a[:2000] for a in (z, mu, ls))
    x = rng.standard_normal((4096, 38)).astype(np.float32)
    w = rng.standard_normal((38, 64)).astype(np.float32)
    b = rng.standard_normal(64).astype(np.float32)
    freq = rng.integers(1, 300, (5000, 256))
    cdfs = np.zeros((5000, 257), np.int64)
    total = _pykernels.CDF_TOTAL
    cdfs[:, 1:] = np.cumsum(freq * total // freq.sum(axis=1, keepdims=True), axis=1)
    cdfs[:, -1] = total
    symbols = rng.integers(0, 256, 5000)

    def nll(mod):
        return lambda: mod.mixture_nll_grad(k, z, mu, ls, np.log(1e-12), True)

    def table(mod):
        return lambda: mod.mixture_pmf_table(tz, tmu, tls)

    def dense(mod):
        return lambda: mod.dense_ordered(x, w, b)

    def code(mod):
        def run():
            enc = mod.RangeEncoder()
            enc.encode(symbols, cdfs)
            data = enc.finish()
            return mod.RangeDecoder(data).decode(cdfs)
        return run

    return [
        ("mixture_nll_grad (20000 x K=10)", nll),
        ("mixture_pmf_table (2000 x K=10)", table),
        ("dense_ordered (4096 x 38 -> 64)", dense),
        ("range code+decode (5000 symbols)", code),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'compiled':>12s} {'python':>12s} {'speedup':>8s}")
    for name, make in cases(rng):
        fc, fp = make(_ckernels), make(_pykernels)
        rc, rp = fc(), fp()
        first_c = rc[0] if isinstance(rc, tuple) else rc
        first_p = rp[0] if isinstance(rp, tuple) else rp
        assert np.allclose(first_c, first_p, rtol=1e-9, atol=1e-12), name
        tc, tp = best_time(fc, args.repeat), best_time(fp, args.repeat)
        print(f"{name:36s} {tc * 1e3:10.2f}ms {tp * 1e3:10.2f}ms {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
