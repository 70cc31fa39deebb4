"""Lossless image codec driven by the multi-level context model.

Layout (little-endian)::

    header   b"ZEDC" | u16 version | u32 width | u32 height | 32-byte weights digest
    payload  raw level-3 pixels (1 byte per sample)
             | 2-bit rounding corrections of levels 3, 2, 1 (4 per byte, low bits first)
             | u32 length | range-coded pixels of levels 2, 1, 0
    trailer  u32 CRC-32 of the payload

Within a level the coded pixels follow the group raster order, TL, TR, BL in
each group and R, G, B in each pixel. The fourth pixel of every group is
recovered from the block sum.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels, mixture
from .context_net import N_POSITIONS, ModelWeights, group_pixels, head_params, trunk_features
from .errors import CodecError, DataError
from .mixture import LogisticMixtureParams
from .pyramid import build_pyramid, fourth_pixel, rounding_residual, unround_quarter

MAGIC = b"ZEDC"
VERSION = 1
CDF_TOTAL = kernels.CDF_TOTAL
_HEADER = struct.Struct("<4sHII32s")
_CRC = struct.Struct("<I")
_N_SYMBOLS = mixture.N_LEVELS


def quantize_cdf(params: LogisticMixtureParams) -> np.ndarray:
    """Integer CDFs ``batch_shape + (257,)`` with total 2**32 and every mass >= 1.

    Each symbol gets ``1 + floor(p * (2**32 - 256))``; what is left goes to the
    most probable symbol (lowest index on ties).
    """
    p = mixture.pmf_table(params).reshape(-1, _N_SYMBOLS)
    p = p / p.sum(axis=1, keepdims=True)
    freq = 1 + np.floor(p * (CDF_TOTAL - _N_SYMBOLS)).astype(np.int64)
    rows = np.arange(freq.shape[0])
    freq[rows, np.argmax(p, axis=1)] += CDF_TOTAL - freq.sum(axis=1)
    cdf = np.zeros((freq.shape[0], _N_SYMBOLS + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf.reshape(params.batch_shape + (_N_SYMBOLS + 1,))


@dataclass(frozen=True)
class Bitstream:
    width: int
    height: int
    digest: bytes
    payload: bytes
    version: int = VERSION

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.version, self.width, self.height, self.digest)
        return head + self.payload + _CRC.pack(zlib.crc32(self.payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size + _CRC.size:
            raise CodecError(f"stream of {len(data)} bytes is shorter than header and checksum")
        magic, version, width, height, digest = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CodecError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CodecError(f"unsupported stream version {version}")
        payload = bytes(data[_HEADER.size:len(data) - _CRC.size])
        # the range coder's final flush bytes are only partly read, so a flip
        # there would otherwise decode silently
        if _CRC.unpack_from(data, len(data) - _CRC.size)[0] != zlib.crc32(payload):
            raise CodecError("checksum mismatch: stream is corrupted")
        return cls(width, height, digest, payload, version)

    def sections(self):
        """``(raw, residual_bytes, coded)`` slices of the payload."""
        if self.width == 0 or self.height == 0 or self.width % 8 or self.height % 8:
            raise CodecError(f"invalid dimensions {self.width}x{self.height}")
        n_raw, n_res = _section_sizes(self.height, self.width)
        need = n_raw + n_res + 4
        if len(self.payload) < need:
            raise CodecError("payload is truncated")
        (n_coded,) = struct.unpack_from("<I", self.payload, n_raw + n_res)
        coded = self.payload[need:]
        if len(coded) != n_coded:
            raise CodecError(f"coded section holds {len(coded)} bytes, header says {n_coded}")
        return self.payload[:n_raw], self.payload[n_raw:n_raw + n_res], coded

    @property
    def coded_bits(self) -> int:
        return 8 * len(self.sections()[2])

    @property
    def side_bits(self) -> int:
        n_raw, n_res = _section_sizes(self.height, self.width)
        return 8 * (n_raw + n_res)


def _section_sizes(h, w):
    n_raw = (h // 8) * (w // 8) * 3
    n_codes = sum((h >> l) * (w >> l) * 3 for l in (3, 2, 1))
    return n_raw, (n_codes + 3) // 4


def _pack2(codes) -> bytes:
    c = np.asarray(codes, dtype=np.uint8).reshape(-1)
    pad = (-c.size) % 4
    c = np.concatenate([c, np.zeros(pad, np.uint8)]).reshape(-1, 4)
    return (c[:, 0] | (c[:, 1] << 2) | (c[:, 2] << 4) | (c[:, 3] << 6)).astype(np.uint8).tobytes()


def _unpack2(data: bytes, n) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    c = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    return c[:n].astype(np.int32)


def _level_context(weights, level, y_lr):
    h, w = y_lr.shape[:2]
    feats, _ = trunk_features(weights, level, y_lr[None])
    return feats.reshape(h * w, -1), y_lr.reshape(h * w, 3)


def _level_cdfs(weights, level, y_lr, x_hr) -> np.ndarray:
    """Encoder-side CDFs ``(M, 3 positions, 3 channels, 257)``."""
    feats, ylr = _level_context(weights, level, y_lr)
    M = feats.shape[0]
    known = [g.reshape(M, 3) for g in group_pixels(x_hr)[:N_POSITIONS]]
    out = []
    for p in range(N_POSITIONS):
        prm, _ = head_params(weights, level, p, feats, ylr, known[:p], ordered=True)
        out.append(quantize_cdf(LogisticMixtureParams(*prm)))
    return np.stack(out, axis=1)


def _check_weights(weights: ModelWeights):
    if weights.config.levels != 3:
        raise DataError(f"codec needs 3 coded levels, weights have {weights.config.levels}")


def encode(image, weights: ModelWeights) -> Bitstream:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"expected an (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    if h == 0 or w == 0 or h % 8 or w % 8:
        raise DataError(f"image size {w}x{h} is not a multiple of 8; crop it first")
    _check_weights(weights)
    pyr = build_pyramid(img)
    raw = np.ascontiguousarray(pyr.x[3]).tobytes()
    res = _pack2(np.concatenate([rounding_residual(pyr.y[l]).reshape(-1) for l in (3, 2, 1)]))
    enc = kernels.RangeEncoder()
    for level in (2, 1, 0):
        x_hr = pyr.x[level]
        cdfs = _level_cdfs(weights, level, pyr.y[level + 1], x_hr)
        M = cdfs.shape[0]
        symbols = np.stack(group_pixels(x_hr)[:N_POSITIONS], axis=2).reshape(M, N_POSITIONS, 3)
        enc.encode(symbols.reshape(-1).astype(np.int64), cdfs.reshape(-1, _N_SYMBOLS + 1))
    coded = enc.finish()
    payload = raw + res + struct.pack("<I", len(coded)) + coded
    return Bitstream(w, h, weights.digest(), payload)


def _decode_level(dec, weights, level, y_lr) -> np.ndarray:
    h, w = y_lr.shape[:2]
    feats, ylr = _level_context(weights, level, y_lr)
    M = feats.shape[0]
    tl_prm, _ = head_params(weights, level, 0, feats, ylr, ordered=True)
    tl_cdf = quantize_cdf(LogisticMixtureParams(*tl_prm))
    known = np.empty((M, N_POSITIONS, 3), dtype=np.uint8)
    for g in range(M):
        known[g, 0] = dec.decode(tl_cdf[g])
        for p in (1, 2):
            prm, _ = head_params(weights, level, p, feats[g:g + 1], ylr[g:g + 1],
                                 [known[g:g + 1, q] for q in range(p)], ordered=True)
            known[g, p] = dec.decode(quantize_cdf(LogisticMixtureParams(*prm))[0])
    tl, tr, bl = (known[:, p].reshape(h, w, 3) for p in range(N_POSITIONS))
    try:
        br = fourth_pixel(y_lr, tl, tr, bl)
    except DataError:
        raise CodecError(f"level {level}: decoded group violates its block sum (corrupt stream)") from None
    out = np.empty((2 * h, 2 * w, 3), dtype=np.uint8)
    out[0::2, 0::2], out[0::2, 1::2], out[1::2, 0::2], out[1::2, 1::2] = tl, tr, bl, br
    return out


def decode(stream, weights: ModelWeights) -> np.ndarray:
    bs = stream if isinstance(stream, Bitstream) else Bitstream.from_bytes(stream)
    _check_weights(weights)
    if bs.digest != weights.digest():
        raise CodecError("stream was encoded with different weights (digest mismatch)")
    raw, res, coded = bs.sections()
    h, w = bs.height, bs.width
    x = np.frombuffer(raw, dtype=np.uint8).reshape(h // 8, w // 8, 3)
    counts = [(h >> l) * (w >> l) * 3 for l in (3, 2, 1)]
    codes = _unpack2(res, sum(counts))
    residual, start = {}, 0
    for l, n in zip((3, 2, 1), counts):
        residual[l] = codes[start:start + n].reshape(h >> l, w >> l, 3)
        start += n
    dec = kernels.RangeDecoder(coded)
    for level in (2, 1, 0):
        y_lr = unround_quarter(x.astype(np.int32), residual[level + 1]).astype(np.int32)
        if np.any(y_lr < 0) or np.any(y_lr > 1020):
            raise CodecError(f"level {level + 1}: rounding corrections give an impossible block sum")
        x = _decode_level(dec, weights, level, y_lr)
    if dec.bytes_consumed != len(coded):
        raise CodecError(f"decoder used {dec.bytes_consumed} of {len(coded)} coded bytes (corrupt stream)")
    return x


def compress(image, weights: ModelWeights) -> bytes:
    return encode(image, weights).to_bytes()


def decompress(data: bytes, weights: ModelWeights) -> np.ndarray:
    return decode(data, weights)
