"""Conditional pixel predictor for one pyramid level.

For level ``l`` the network reads the quarter-unit averages ``y[l+1]`` through
a small convolutional trunk and, for every 2x2 group of ``x[l]``, predicts a
logistic mixture per channel for the top-left, top-right and bottom-left
pixels in turn. Each later position also sees the RGB values of the earlier
ones; the bottom-right pixel follows from the block sum.

Everything is plain numpy with hand-written backward passes. Compute dtype
follows the weights (float32 in production, float64 for gradient checks);
the mixture math is always float64.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels, mixture
from .errors import DataError, FormatError, NumericalError
from .mixture import LogisticMixtureParams

N_POSITIONS = 3  # TL, TR, BL
POSITION_NAMES = ("TL", "TR", "BL")
N_PARAM_TYPES = 3  # weight logit, location offset, log scale
MU_OFFSET_SCALE = 16.0  # pixel levels per unit of raw location output
INIT_SCALE = 8.0
RELU_BIAS_INIT = 0.01
WEIGHTS_MAGIC = b"ZEDW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    n_components: int = 10
    trunk_depth: int = 4
    trunk_channels: int = 32
    head_width: int = 64
    levels: int = 3

    def __post_init__(self):
        if self.n_components < 1 or self.n_components > 64:
            raise ValueError("n_components must be in [1, 64]")
        if self.trunk_depth < 1 or self.trunk_channels < 1 or self.head_width < 1:
            raise ValueError("trunk_depth, trunk_channels and head_width must be positive")
        if self.levels != 3:
            raise ValueError("exactly 3 predicted levels are supported")

    @property
    def receptive_field(self) -> int:
        return 2 * self.trunk_depth + 1

    def tensor_shapes(self) -> dict[str, tuple]:
        shapes = {}
        C, H, K = self.trunk_channels, self.head_width, self.n_components
        for lvl in range(self.levels):
            cin = 3
            for i in range(self.trunk_depth):
                shapes[f"level{lvl}.trunk{i}.weight"] = (3, 3, cin, C)
                shapes[f"level{lvl}.trunk{i}.bias"] = (C,)
                cin = C
            for p in range(N_POSITIONS):
                shapes[f"level{lvl}.head{p}.fc1.weight"] = (C + 3 * p, H)
                shapes[f"level{lvl}.head{p}.fc1.bias"] = (H,)
                shapes[f"level{lvl}.head{p}.fc2.weight"] = (H, 3 * N_PARAM_TYPES * K)
                shapes[f"level{lvl}.head{p}.fc2.bias"] = (3 * N_PARAM_TYPES * K,)
        return shapes


@dataclass
class ModelWeights:
    config: NetConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.tensor_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise DataError(f"weights do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise DataError(f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}")
        # canonical order
        self.tensors = {name: self.tensors[name] for name in expected}

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def check_finite(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"tensor {name} contains NaN or Inf")

    def to_bytes(self) -> bytes:
        self.check_finite()
        buf = io.BytesIO()
        buf.write(WEIGHTS_MAGIC)
        buf.write(struct.pack("<H", WEIGHTS_VERSION))
        cfg = self.config
        buf.write(struct.pack("<5I", cfg.n_components, cfg.trunk_depth, cfg.trunk_channels,
                              cfg.head_width, cfg.levels))
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, t in self.tensors.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
            buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, source="<bytes>") -> "ModelWeights":
        mv = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(mv):
                raise FormatError(f"{source}: truncated weights file")
            out = mv[pos:pos + n]
            pos += n
            return out

        if bytes(take(4)) != WEIGHTS_MAGIC:
            raise FormatError(f"{source}: not a weights file (bad magic)")
        (version,) = struct.unpack("<H", take(2))
        if version != WEIGHTS_VERSION:
            raise FormatError(f"{source}: unsupported weights version {version}")
        try:
            config = NetConfig(*struct.unpack("<5I", take(20)))
        except ValueError as exc:
            raise FormatError(f"{source}: invalid config ({exc})") from None
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2))
            name = bytes(take(nlen)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if pos != len(mv):
            raise FormatError(f"{source}: trailing bytes in weights file")
        try:
            w = cls(config, tensors)
        except DataError as exc:
            raise FormatError(f"{source}: {exc}") from None
        w.check_finite()
        return w

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"{path}: cannot read weights ({exc.strerror})") from None
        return cls.from_bytes(data, source=str(path))

    def digest(self) -> bytes:
        """SHA-256 of the serialized weights."""
        return hashlib.sha256(self.to_bytes()).digest()


def init_weights(config: NetConfig = NetConfig(), seed: int = 0) -> ModelWeights:
    """Deterministic fan-in scaled uniform init.

    Output biases start the model at mixtures centred on the low-resolution
    value with scale ``INIT_SCALE``.
    """
    rng = np.random.default_rng(seed)
    K = config.n_components
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("fc2.bias"):
            t = np.zeros(shape)
            t.reshape(3, N_PARAM_TYPES, K)[:, 2, :] = np.log(INIT_SCALE)
        elif name.endswith(".bias"):
            # ReLU layers: keep pre-activations off the kink when inputs are all zero
            t = np.full(shape, RELU_BIAS_INIT)
        elif name.endswith("fc2.weight"):
            bound = 1.0 / np.sqrt(shape[0])
            t = rng.uniform(-bound, bound, size=shape)
            t.reshape(shape[0], 3, N_PARAM_TYPES, K)[:, :, 1, :] /= MU_OFFSET_SCALE
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            t = rng.uniform(-bound, bound, size=shape)
        tensors[name] = t.astype(np.float32)
    return ModelWeights(config, tensors)


# -- layers ---------------------------------------------------------------

def _pad_edge(a):
    return np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")


def _unpad_edge_grad(dpad):
    da = dpad[:, 1:-1, 1:-1].copy()
    # fold the replicated border back onto the pixels it copied
    da[:, 0, :] += dpad[:, 0, 1:-1]
    da[:, -1, :] += dpad[:, -1, 1:-1]
    da[:, :, 0] += dpad[:, 1:-1, 0]
    da[:, :, -1] += dpad[:, 1:-1, -1]
    da[:, 0, 0] += dpad[:, 0, 0]
    da[:, 0, -1] += dpad[:, 0, -1]
    da[:, -1, 0] += dpad[:, -1, 0]
    da[:, -1, -1] += dpad[:, -1, -1]
    return da


def _im2col(a):
    n, h, w, c = a.shape
    ap = _pad_edge(a)
    return np.concatenate([ap[:, di:di + h, dj:dj + w, :] for di in range(3) for dj in range(3)], axis=-1)


def _col2im(dcols, shape):
    n, h, w, c = shape
    dpad = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    dcols = dcols.reshape(n, h, w, 9, c)
    idx = 0
    for di in range(3):
        for dj in range(3):
            dpad[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, idx, :]
            idx += 1
    return _unpad_edge_grad(dpad)


def normalize_quarters(y, dtype):
    return np.asarray(y).astype(dtype) / dtype(510.0) - dtype(1.0)


def normalize_pixels(x, dtype):
    return np.asarray(x).astype(dtype) / dtype(127.5) - dtype(1.0)


def group_pixels(x_hr):
    """Split ``(..., 2h, 2w, 3)`` into TL, TR, BL, BR planes of shape ``(..., h, w, 3)``."""
    return (x_hr[..., 0::2, 0::2, :], x_hr[..., 0::2, 1::2, :],
            x_hr[..., 1::2, 0::2, :], x_hr[..., 1::2, 1::2, :])


# -- forward / backward ---------------------------------------------------

@dataclass
class TrunkCache:
    cols: list
    masks: list
    shape: tuple


def trunk_features(weights: ModelWeights, level: int, y_lr, keep_cache=False):
    """Trunk output, shape ``(N, h, w, C)``, for quarter-unit input ``(N, h, w, 3)``."""
    dtype = weights.dtype.type
    a = normalize_quarters(y_lr, dtype)
    cols_list, masks = [], []
    for i in range(weights.config.trunk_depth):
        W = weights[f"level{level}.trunk{i}.weight"]
        b = weights[f"level{level}.trunk{i}.bias"]
        cols = _im2col(a)
        pre = cols @ W.reshape(-1, W.shape[-1]) + b
        mask = pre > 0
        a = pre * mask
        if keep_cache:
            cols_list.append(cols)
            masks.append(mask)
    cache = TrunkCache(cols_list, masks, a.shape) if keep_cache else None
    return a, cache


@dataclass
class HeadCache:
    inp: np.ndarray
    hidden: np.ndarray
    scale_mask: np.ndarray


def head_params(weights: ModelWeights, level: int, position: int, feats, y_lr, known=(), keep_cache=False,
                ordered=False):
    """Mixture parameters for one in-group position.

    ``feats`` is ``(M, C)`` trunk output, ``y_lr`` the ``(M, 3)`` quarter
    values and ``known`` the ``(M, 3)`` pixel arrays of earlier positions.
    Returns float64 ``(logits, mu, log_scales)`` each ``(M, 3, K)``.
    ``ordered`` selects the batch-invariant ``kernels.dense_ordered``; the
    codec uses it because its decoder evaluates one group at a time.
    """
    dense = kernels.dense_ordered if ordered else (lambda x, w, b: x @ w + b)
    dtype = weights.dtype.type
    K = weights.config.n_components
    prefix = f"level{level}.head{position}"
    if len(known) != position:
        raise ValueError(f"position {position} needs exactly {position} known pixels")
    inp = np.concatenate([feats] + [normalize_pixels(k, dtype) for k in known], axis=1) if known else feats
    hidden = dense(inp, weights[prefix + ".fc1.weight"], weights[prefix + ".fc1.bias"])
    np.maximum(hidden, 0, out=hidden)
    out = dense(hidden, weights[prefix + ".fc2.weight"], weights[prefix + ".fc2.bias"])
    out = out.reshape(-1, 3, N_PARAM_TYPES, K).astype(np.float64)
    base = np.asarray(y_lr, dtype=np.float64) / 4.0
    logits = out[:, :, 0, :]
    mu = base[:, :, None] + MU_OFFSET_SCALE * out[:, :, 1, :]
    raw_ls = out[:, :, 2, :]
    log_s = mixture.clamp_log_scales(raw_ls)
    cache = None
    if keep_cache:
        mask = (raw_ls > mixture.LOG_SCALE_MIN) & (raw_ls < mixture.LOG_SCALE_MAX)
        cache = HeadCache(inp, hidden, mask)
    return (logits, mu, log_s), cache


def _check_dims(y_lr, x_hr):
    if y_lr.shape[-1] != 3 or x_hr.shape[-1] != 3:
        raise DataError("expected 3-channel inputs")
    if x_hr.shape[-3] != 2 * y_lr.shape[-3] or x_hr.shape[-2] != 2 * y_lr.shape[-2]:
        raise DataError(f"high-resolution shape {x_hr.shape[-3:-1]} is not twice {y_lr.shape[-3:-1]}")


def forward_level(weights: ModelWeights, level: int, y_lr, x_hr, keep_cache=False):
    """Teacher-forced parameters for a batch ``y_lr (N,h,w,3)``, ``x_hr (N,2h,2w,3)``.

    Returns ``([(logits, mu, log_s)] * 3, cache)`` with arrays ``(N*h*w, 3, K)``.
    """
    y_lr = np.asarray(y_lr)
    x_hr = np.asarray(x_hr)
    _check_dims(y_lr, x_hr)
    feats, tcache = trunk_features(weights, level, y_lr, keep_cache)
    M = feats.shape[0] * feats.shape[1] * feats.shape[2]
    feats = feats.reshape(M, -1)
    ylr = y_lr.reshape(M, 3)
    known = [g.reshape(M, 3) for g in group_pixels(x_hr)[:3]]
    params, hcaches = [], []
    for p in range(N_POSITIONS):
        prm, hc = head_params(weights, level, p, feats, ylr, known[:p], keep_cache)
        params.append(prm)
        hcaches.append(hc)
    return params, ((tcache, hcaches) if keep_cache else None)


def backward_level(weights: ModelWeights, level: int, cache, grads) -> dict:
    """Backpropagate per-position ``(g_logits, g_mu, g_log_s)`` to weight gradients."""
    tcache, hcaches = cache
    dtype = weights.dtype
    C = weights.config.trunk_channels
    K = weights.config.n_components
    out = {}
    dfeats = None
    for p in range(N_POSITIONS):
        prefix = f"level{level}.head{p}"
        hc = hcaches[p]
        g_logits, g_mu, g_ls = grads[p]
        M = g_logits.shape[0]
        dout = np.empty((M, 3, N_PARAM_TYPES, K), dtype=np.float64)
        dout[:, :, 0, :] = g_logits
        dout[:, :, 1, :] = g_mu * MU_OFFSET_SCALE
        dout[:, :, 2, :] = g_ls * hc.scale_mask
        dout = dout.reshape(M, -1).astype(dtype)
        W2 = weights[prefix + ".fc2.weight"]
        out[prefix + ".fc2.weight"] = hc.hidden.T @ dout
        out[prefix + ".fc2.bias"] = dout.sum(axis=0)
        dhid = (dout @ W2.T) * (hc.hidden > 0)
        out[prefix + ".fc1.weight"] = hc.inp.T @ dhid
        out[prefix + ".fc1.bias"] = dhid.sum(axis=0)
        dinp = dhid @ weights[prefix + ".fc1.weight"].T
        dfeats = dinp[:, :C] if dfeats is None else dfeats + dinp[:, :C]
    da = dfeats.reshape(tcache.shape)
    for i in reversed(range(weights.config.trunk_depth)):
        name = f"level{level}.trunk{i}"
        W = weights[name + ".weight"]
        dpre = da * tcache.masks[i]
        cols = tcache.cols[i]
        flat = dpre.reshape(-1, W.shape[-1])
        out[name + ".weight"] = (cols.reshape(-1, cols.shape[-1]).T @ flat).reshape(W.shape)
        out[name + ".bias"] = flat.sum(axis=0)
        if i > 0:
            dcols = flat @ W.reshape(-1, W.shape[-1]).T
            da = _col2im(dcols, tcache.cols[i - 1].shape[:3] + (W.shape[2],))
    return out


# -- public per-image API ---------------------------------------------------

@dataclass(frozen=True)
class DistributionMap:
    """Mixture parameters for the coded pixels of one level.

    ``params`` arrays have shape ``(h, w, 3 positions, 3 channels, K)`` where
    ``(h, w)`` is the group grid; positions are TL, TR, BL.
    """
    level: int
    params: LogisticMixtureParams

    @property
    def grid_shape(self):
        return self.params.batch_shape[:2]


def analyze_level(weights: ModelWeights, level: int, y_lr, x_hr) -> DistributionMap:
    y_lr = np.asarray(y_lr)
    x_hr = np.asarray(x_hr)
    _check_dims(y_lr, x_hr)
    h, w = y_lr.shape[:2]
    params, _ = forward_level(weights, level, y_lr[None], x_hr[None])
    K = weights.config.n_components
    stacked = [np.stack([prm[i] for prm in params], axis=1).reshape(h, w, N_POSITIONS, 3, K)
               for i in range(3)]
    return DistributionMap(level, LogisticMixtureParams(*stacked))


def sample_level(weights: ModelWeights, level: int, y_lr, rng=None):
    """Draw a level from the model given its low-resolution context.

    TL, TR and BL are sampled in order from their conditionals; BR follows
    from the block sum and is clamped to [0, 255] when the samples make that
    impossible. Returns ``(image, n_clamped)``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    y_lr = np.asarray(y_lr)
    h, w = y_lr.shape[:2]
    M = h * w
    feats, _ = trunk_features(weights, level, y_lr[None])
    feats = feats.reshape(M, -1)
    ylr = y_lr.reshape(M, 3)
    known = []
    for p in range(N_POSITIONS):
        (logits, mu, log_s), _ = head_params(weights, level, p, feats, ylr, known)
        known.append(mixture.sample(LogisticMixtureParams(logits, mu, log_s), rng).astype(np.uint8))
    br = ylr.astype(np.int32) - sum(k.astype(np.int32) for k in known)
    bad = int(np.count_nonzero((br < 0) | (br > 255)))
    br = np.clip(br, 0, 255).astype(np.uint8)
    out = np.empty((2 * h, 2 * w, 3), dtype=np.uint8)
    tl, tr, bl = (k.reshape(h, w, 3) for k in known)
    out[0::2, 0::2], out[0::2, 1::2], out[1::2, 0::2], out[1::2, 1::2] = tl, tr, bl, br.reshape(h, w, 3)
    return out, bad
