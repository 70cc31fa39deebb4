"""Discretized logistic mixture over the 256 pixel levels.

A component with location ``mu`` and scale ``s`` puts mass
``sigmoid((k - mu + 0.5) / s) - sigmoid((k - mu - 0.5) / s)`` on level ``k``;
the tails below 0 and above 255 are folded into the two edge bins. Parameters
carry a trailing component axis ``K`` and any number of leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))
MIN_SCALE = 0.05
MAX_SCALE = 64.0
LOG_SCALE_MIN = float(np.log(MIN_SCALE))
LOG_SCALE_MAX = float(np.log(MAX_SCALE))
N_LEVELS = 256


@dataclass(frozen=True)
class LogisticMixtureParams:
    weight_logits: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray

    def __post_init__(self):
        for name in ("weight_logits", "means", "log_scales"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.weight_logits.shape == self.means.shape == self.log_scales.shape):
            raise ValueError("weight_logits, means and log_scales must share one shape")
        if self.weight_logits.ndim == 0:
            raise ValueError("parameters need a trailing component axis")

    @classmethod
    def single(cls, mu: float, scale: float) -> "LogisticMixtureParams":
        return cls(np.zeros(1), np.array([mu], float), np.array([np.log(scale)]))

    @property
    def n_components(self) -> int:
        return self.weight_logits.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.weight_logits.shape[:-1]

    @property
    def weights(self) -> np.ndarray:
        z = self.weight_logits - self.weight_logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def __getitem__(self, idx) -> "LogisticMixtureParams":
        if not isinstance(idx, tuple):
            idx = (idx,)
        idx = idx + (slice(None),)
        return LogisticMixtureParams(self.weight_logits[idx], self.means[idx], self.log_scales[idx])

    def _flat(self):
        K = self.n_components
        return (self.weight_logits.reshape(-1, K), self.means.reshape(-1, K),
                self.log_scales.reshape(-1, K))


class MixtureGrad(NamedTuple):
    weight_logits: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray


def clamp_log_scales(raw):
    """Scale activation: ``s = exp(raw)`` restricted to ``[MIN_SCALE, MAX_SCALE]``."""
    return np.clip(raw, LOG_SCALE_MIN, LOG_SCALE_MAX)


def _broadcast_k(params: LogisticMixtureParams, k):
    k = np.asarray(k)
    if np.any((k < 0) | (k > 255)):
        raise ValueError("pixel value outside [0, 255]")
    return np.broadcast_to(k, params.batch_shape).reshape(-1).astype(np.int64)


def _unflatten(values, params, k):
    shape = np.broadcast_shapes(params.batch_shape, np.shape(k))
    out = values.reshape(shape)
    return float(out) if out.ndim == 0 else out


def _nll(params, k, log_floor, want_grad=False):
    z, mu, ls = params._flat()
    return kernels.mixture_nll_grad(_broadcast_k(params, k), z, mu, ls, log_floor, want_grad)


def log_pmf(params: LogisticMixtureParams, k):
    """Natural-log probability of level ``k``, floored at ``log(PROB_FLOOR)``."""
    nll, _ = _nll(params, k, LOG_PROB_FLOOR)
    return _unflatten(-nll, params, k)


def pmf(params: LogisticMixtureParams, k):
    with np.errstate(over="ignore"):
        nll, _ = _nll(params, k, -np.inf)
    return _unflatten(np.exp(-nll), params, k)


def pmf_table(params: LogisticMixtureParams) -> np.ndarray:
    """Probabilities of all 256 levels, shape ``batch_shape + (256,)``."""
    z, mu, ls = params._flat()
    table = kernels.mixture_pmf_table(z, mu, ls)
    return table.reshape(params.batch_shape + (N_LEVELS,))


def entropy_from_table(table: np.ndarray) -> np.ndarray:
    p = np.asarray(table)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def entropy_nats(params: LogisticMixtureParams):
    """Entropy of the 256-level distribution by direct summation (no floor)."""
    h = entropy_from_table(pmf_table(params))
    return float(h) if np.ndim(h) == 0 else h


def sample(params: LogisticMixtureParams, rng=None):
    """Inverse-CDF draw over the 256-level table; ``rng`` is a Generator or a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    table = pmf_table(params).reshape(-1, N_LEVELS)
    cdf = np.cumsum(table, axis=-1)
    u = rng.random(table.shape[0]) * cdf[:, -1]
    k = np.minimum((cdf <= u[:, None]).sum(axis=-1), 255)
    out = k.reshape(params.batch_shape)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


def nll_grad(params: LogisticMixtureParams, k):
    """``-log_pmf(params, k)`` and its gradient w.r.t. the raw parameters.

    Gradients are taken w.r.t. ``weight_logits``, ``means`` and ``log_scales``
    (no scale clamp here). Where the floor is active the gradient is zero.
    """
    nll, grads = _nll(params, k, LOG_PROB_FLOOR, want_grad=True)
    shape = params.weight_logits.shape
    g = MixtureGrad(*(x.reshape(shape) for x in grads))
    return _unflatten(nll, params, k), g
