"""Fit the level predictors on real images by minimizing per-pixel NLL."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .context_net import (
    N_POSITIONS,
    ModelWeights,
    NetConfig,
    backward_level,
    forward_level,
    group_pixels,
    init_weights,
)
from .corpus_io import CorpusManifest, load_image
from .errors import DataError, NumericalError
from .mixture import LOG_PROB_FLOOR
from .pyramid import Pyramid, build_pyramid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 64
    batch_size: int = 16
    steps: int = 20000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    level_weights: tuple = (1.0, 1.0, 1.0)
    log_every: int = 1

    def __post_init__(self):
        if self.crop_size <= 0 or self.crop_size % 8:
            raise ValueError("crop_size must be a positive multiple of 8")
        if self.batch_size <= 0 or self.steps <= 0 or self.log_every <= 0:
            raise ValueError("batch_size, steps and log_every must be positive")
        if self.learning_rate <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid optimizer settings")
        object.__setattr__(self, "level_weights", tuple(float(v) for v in self.level_weights))
        if len(self.level_weights) != 3 or any(v < 0 for v in self.level_weights):
            raise ValueError("level_weights must be three non-negative numbers")


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    level_losses: list = field(default_factory=list)
    initial_nll: float = math.nan
    final_nll: float = math.nan
    wall_time: float = 0.0

    def records(self):
        for s, l, ll in zip(self.steps, self.losses, self.level_losses):
            yield {"step": s, "loss": l, "level_losses": list(ll)}

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"final": True, "initial_nll": self.initial_nll,
                                 "final_nll": self.final_nll, "wall_time": self.wall_time}) + "\n")


def stack_pyramids(pyramids) -> Pyramid:
    if isinstance(pyramids, Pyramid):
        return pyramids
    pyramids = list(pyramids)
    if not pyramids:
        raise DataError("empty batch")
    shapes = {p.x[0].shape for p in pyramids}
    if len(shapes) != 1:
        raise DataError(f"batch mixes image sizes {sorted(shapes)}")
    xs = tuple(np.stack([p.x[l] for p in pyramids]) for l in range(4))
    ys = (None,) + tuple(np.stack([p.y[l] for p in pyramids]) for l in range(1, 4))
    return Pyramid(xs, ys)


def _batch_size(pyr: Pyramid) -> int:
    return 1 if pyr.x[0].ndim == 3 else pyr.x[0].shape[0]


def _level_nll(weights, level, pyr, want_grad, keep_cache):
    x_hr = pyr.x[level]
    y_lr = pyr.y[level + 1]
    if x_hr.ndim == 3:
        x_hr, y_lr = x_hr[None], y_lr[None]
    params, cache = forward_level(weights, level, y_lr, x_hr, keep_cache=keep_cache)
    groups = group_pixels(x_hr)
    nlls, grads = [], []
    for p in range(N_POSITIONS):
        logits, mu, log_s = params[p]
        K = logits.shape[-1]
        target = groups[p].reshape(-1)
        nll, g = kernels.mixture_nll_grad(target, logits.reshape(-1, K), mu.reshape(-1, K),
                                          log_s.reshape(-1, K), LOG_PROB_FLOOR, want_grad)
        nlls.append(nll.reshape(x_hr.shape[0], -1))
        if want_grad:
            grads.append(tuple(a.reshape(logits.shape) for a in g))
    # (N, n_coded) per-entry NLL for this level
    return np.concatenate(nlls, axis=1), grads, cache


def loss_and_grad(weights: ModelWeights, pyramids, level_weights=(1.0, 1.0, 1.0), names=None, want_grad=True):
    """Weighted mean NLL (nats per coded pixel and channel) and its gradient.

    Returns ``(loss, grads, level_losses)``; ``grads`` maps tensor names to
    arrays of the weights' dtype (``None`` when ``want_grad`` is false).
    """
    pyr = stack_pyramids(pyramids)
    n = _batch_size(pyr)
    grads = {k: np.zeros_like(v) for k, v in weights.tensors.items()} if want_grad else None
    total = 0.0
    level_losses = []
    for level in range(3):
        lw = float(level_weights[level])
        if lw == 0.0:
            level_losses.append(0.0)
            continue
        nll, g, cache = _level_nll(weights, level, pyr, want_grad, keep_cache=want_grad)
        level_loss = float(nll.mean())
        if not math.isfinite(level_loss):
            per_image = nll.mean(axis=1)
            bad = int(np.flatnonzero(~np.isfinite(per_image))[0])
            who = names[bad] if names is not None else f"batch index {bad}"
            raise NumericalError(f"non-finite loss at level {level} for image {who}")
        level_losses.append(level_loss)
        total += lw * level_loss
        if want_grad:
            scale = lw / nll.size
            g = [tuple(a * scale for a in gp) for gp in g]
            grads.update(backward_level(weights, level, cache, g))
    return total, grads, level_losses


class Adam:
    def __init__(self, weights: ModelWeights, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
        self.t = 0

    def step(self, weights: ModelWeights, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        # fixed parameter order keeps updates reproducible
        for name in weights.tensors:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            weights.tensors[name] -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(weights.dtype)


def _validation_batch(images, crop):
    out = []
    for img in images[:32]:
        h, w = img.shape[:2]
        top, left = (h - crop) // 2, (w - crop) // 2
        out.append(build_pyramid(img[top:top + crop, left:left + crop]))
    return stack_pyramids(out)


def train_on_images(images, config: TrainConfig = TrainConfig(), net_config: NetConfig = NetConfig(),
                    names=None, weights: ModelWeights | None = None, progress=None):
    """Train on in-memory ``(H, W, 3)`` uint8 images (all assumed real)."""
    if not images:
        raise DataError("no training images")
    names = list(names) if names is not None else [f"image {i}" for i in range(len(images))]
    crop = config.crop_size
    for img, name in zip(images, names):
        if img.shape[0] < crop or img.shape[1] < crop:
            raise DataError(f"{name}: {img.shape[1]}x{img.shape[0]} is smaller than crop_size {crop}")
    weights = init_weights(net_config, config.seed) if weights is None else weights.copy()
    rng = np.random.default_rng(config.seed)
    opt = Adam(weights, config.learning_rate, config.beta1, config.beta2, config.eps)
    report = TrainReport()
    val = _validation_batch(images, crop)
    report.initial_nll = loss_and_grad(weights, val, config.level_weights, want_grad=False)[0]
    start = time.perf_counter()
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(images), size=config.batch_size)
        batch = np.empty((config.batch_size, crop, crop, 3), dtype=np.uint8)
        for b, i in enumerate(idx):
            h, w = images[i].shape[:2]
            top = int(rng.integers(0, h - crop + 1))
            left = int(rng.integers(0, w - crop + 1))
            batch[b] = images[i][top:top + crop, left:left + crop]
        pyr = build_pyramid(batch)
        loss, grads, level_losses = loss_and_grad(weights, pyr, config.level_weights,
                                                  names=[names[i] for i in idx])
        opt.step(weights, grads)
        if step % config.log_every == 0 or step == config.steps:
            report.steps.append(step)
            report.losses.append(loss)
            report.level_losses.append(level_losses)
        if step % 100 == 0 or step == config.steps:
            log.info("step %d/%d loss %.4f levels %s", step, config.steps, loss,
                     " ".join(f"{v:.4f}" for v in level_losses))
            if progress is not None:
                progress(step, loss)
    report.wall_time = time.perf_counter() - start
    weights.check_finite()
    report.final_nll = loss_and_grad(weights, val, config.level_weights, want_grad=False)[0]
    return weights, report


def train(corpus: CorpusManifest, config: TrainConfig = TrainConfig(), net_config: NetConfig = NetConfig(),
          progress=None):
    """Train on a manifest of real images; any synthetic entry is an error."""
    synthetic = [e.path for e in corpus if e.label != "real"]
    if synthetic:
        raise DataError(f"training corpus must contain only real images; found synthetic entry {synthetic[0]}")
    if len(corpus) == 0:
        raise DataError("empty training corpus")
    images = [load_image(e.path) for e in corpus]
    return train_on_images(images, config, net_config, names=[e.path for e in corpus], progress=progress)


def relative_error(analytic, numeric, floor=1e-5):
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _loss_and_pattern(weights, pyramid, level_weights):
    """Loss plus every on/off decision the forward pass made.

    The pattern covers trunk and head ReLUs, the scale clamp and the
    probability floor; the loss is smooth wherever it stays fixed.
    """
    pyr = stack_pyramids(pyramid)
    total, pattern = 0.0, []
    for level in range(3):
        lw = float(level_weights[level])
        if lw == 0.0:
            continue
        nll, _, (tcache, hcaches) = _level_nll(weights, level, pyr, want_grad=False, keep_cache=True)
        total += lw * float(nll.mean())
        pattern += tcache.masks
        pattern += [m for hc in hcaches for m in (hc.hidden > 0, hc.scale_mask)]
        pattern.append(nll >= -LOG_PROB_FLOOR)
    return total, pattern


@dataclass
class GradCheckResult:
    max_error: float
    n_checked: int
    n_kinks: int


def grad_check_details(weights: ModelWeights, pyramid, epsilon=1e-4, n_params=200, seed=0,
                       level_weights=(1.0, 1.0, 1.0), floor=1e-5) -> GradCheckResult:
    """Compare analytic and central-difference gradients on random coordinates.

    The analytic gradient is evaluated in the weights' own dtype; the finite
    differences always run on a float64 copy. A coordinate whose two probes
    see different ReLU, clamp or floor states straddles a kink, where a
    central difference does not estimate the derivative; such coordinates are
    counted in ``n_kinks`` and left out of ``max_error``.
    """
    _, grads, _ = loss_and_grad(weights, pyramid, level_weights)
    w64 = weights.astype(np.float64)
    names = list(w64.tensors)
    sizes = np.array([w64[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
    worst, checked, kinks = 0.0, 0, 0
    for fi in np.sort(flat_idx):
        t = int(np.searchsorted(offsets, fi, side="right") - 1)
        name, j = names[t], int(fi - offsets[t])
        arr = w64.tensors[name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + epsilon
        up, pat_up = _loss_and_pattern(w64, pyramid, level_weights)
        arr[j] = orig - epsilon
        down, pat_down = _loss_and_pattern(w64, pyramid, level_weights)
        arr[j] = orig
        if any(not np.array_equal(a, b) for a, b in zip(pat_up, pat_down)):
            kinks += 1
            continue
        numeric = (up - down) / (2 * epsilon)
        analytic = grads[name].reshape(-1)[j]
        worst = max(worst, float(relative_error(analytic, numeric, floor)))
        checked += 1
    return GradCheckResult(worst, checked, kinks)


def grad_check(weights: ModelWeights, pyramid, epsilon=1e-4, n_params=200, seed=0,
               level_weights=(1.0, 1.0, 1.0), floor=1e-5) -> float:
    """Max relative gradient error; see ``grad_check_details``."""
    return grad_check_details(weights, pyramid, epsilon, n_params, seed, level_weights, floor).max_error
