"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when importable; set
``COSTGAP_PURE_PYTHON=1`` to force the numpy/Python fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("COSTGAP_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

mixture_nll_grad = _impl.mixture_nll_grad
mixture_pmf_table = _impl.mixture_pmf_table
RangeEncoder = _impl.RangeEncoder
_dense_ordered = _impl.dense_ordered
RangeDecoder = _impl.RangeDecoder
CDF_TOTAL = _impl.CDF_TOTAL


def dense_ordered(x, w, b):
    """Batch-invariant ``x @ w + b``; the compiled path covers float32 only."""
    if x.dtype == w.dtype == b.dtype == np.float32:
        return _dense_ordered(x, w, b)
    return _pykernels.dense_ordered(x, w, b)
