"""Per-pixel coding cost and entropy maps, their averages and the decision statistics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mixture
from .context_net import N_POSITIONS, ModelWeights, analyze_level, group_pixels
from .errors import DataError, FormatError
from .pyramid import Pyramid, build_pyramid, crop_to_multiple_of_8

N_LEVELS = 3
LN2 = math.log(2.0)


@dataclass(frozen=True)
class LevelMaps:
    """NLL and entropy (nats) of every coded pixel and channel at one level.

    Both maps have shape ``(h, w, 3, 3)``: group grid, position (TL, TR, BL)
    and channel. The deterministic fourth pixel has no entry.
    """
    level: int
    nll_map: np.ndarray
    h_map: np.ndarray

    def __post_init__(self):
        if self.nll_map.shape != self.h_map.shape:
            raise ValueError(f"map shapes differ: {self.nll_map.shape} vs {self.h_map.shape}")

    @property
    def gap_map(self) -> np.ndarray:
        return self.nll_map - self.h_map


@dataclass(frozen=True)
class FeatureVector:
    nll: tuple
    h: tuple

    def as_dict(self) -> dict:
        out = {f"nll{l}": self.nll[l] for l in range(N_LEVELS)}
        out.update({f"h{l}": self.h[l] for l in range(N_LEVELS)})
        return out


@dataclass(frozen=True)
class DecisionStats:
    d: tuple
    delta01: float
    abs_d0: float
    abs_delta01: float

    @property
    def d0(self) -> float:
        return self.d[0]

    def as_dict(self) -> dict:
        out = {f"d{l}": self.d[l] for l in range(N_LEVELS)}
        out.update(delta01=self.delta01, abs_d0=self.abs_d0, abs_delta01=self.abs_delta01)
        return out


def level_maps(weights: ModelWeights, level: int, y_lr, x_hr) -> LevelMaps:
    """Teacher-forced maps for ``x_hr`` given its quarter-unit context ``y_lr``."""
    dist = analyze_level(weights, level, y_lr, x_hr)
    h, w = dist.grid_shape
    target = np.stack(group_pixels(np.asarray(x_hr))[:N_POSITIONS], axis=2).reshape(h, w, N_POSITIONS, 3)
    nll = -mixture.log_pmf(dist.params, target)
    ent = mixture.entropy_nats(dist.params)
    return LevelMaps(level, np.asarray(nll, dtype=np.float64), np.asarray(ent, dtype=np.float64))


def nll_entropy_maps(weights: ModelWeights, pyramid: Pyramid) -> tuple:
    if weights.config.levels != N_LEVELS:
        raise DataError(f"weights describe {weights.config.levels} levels, expected {N_LEVELS}")
    x0 = pyramid.x[0]
    if x0.ndim != 3 or x0.shape[0] % 8 or x0.shape[1] % 8:
        raise DataError(f"pyramid base of shape {x0.shape} is not a crop-aligned single image")
    return tuple(level_maps(weights, l, pyramid.y[l + 1], pyramid.x[l]) for l in range(N_LEVELS))


def aggregate(maps) -> FeatureVector:
    maps = sorted(maps, key=lambda m: m.level)
    if len(maps) != N_LEVELS:
        raise DataError(f"expected maps for {N_LEVELS} levels, got {len(maps)}")
    for m in maps:
        if m.nll_map.size == 0:
            raise DataError(f"level {m.level} maps are empty")
    return FeatureVector(tuple(float(m.nll_map.mean()) for m in maps),
                         tuple(float(m.h_map.mean()) for m in maps))


def statistics(fv: FeatureVector) -> DecisionStats:
    d = tuple(n - h for n, h in zip(fv.nll, fv.h))
    delta01 = d[0] - d[1]
    return DecisionStats(d, delta01, abs(d[0]), abs(delta01))


def image_features(weights: ModelWeights, img):
    """Crop, build the pyramid and return ``(maps, FeatureVector, DecisionStats)``."""
    pyr = build_pyramid(crop_to_multiple_of_8(img))
    maps = nll_entropy_maps(weights, pyr)
    fv = aggregate(maps)
    return maps, fv, statistics(fv)


def in_bits(value):
    return value / LN2


def gap_image(m: LevelMaps) -> np.ndarray:
    """Channel-averaged ``nll - h`` at full level resolution.

    The fourth pixel of each group has no value of its own and takes the mean
    of its three siblings.
    """
    g = m.gap_map.mean(axis=-1)
    h, w = g.shape[:2]
    out = np.empty((2 * h, 2 * w), dtype=np.float64)
    out[0::2, 0::2], out[0::2, 1::2], out[1::2, 0::2] = g[..., 0], g[..., 1], g[..., 2]
    out[1::2, 1::2] = g.mean(axis=-1)
    return out


def export_maps(maps, path) -> list:
    """Write one grayscale PNG per level plus a JSON sidecar.

    ``path`` is a file stem; files are ``<stem>_level<l>.png`` and
    ``<stem>_level<l>.json``. The sidecar holds ``offset`` and ``scale`` with
    ``value = offset + scale * pixel``; a constant map gets scale 0.
    """
    from PIL import Image

    stem = Path(path)
    written = []
    for m in maps:
        g = gap_image(m)
        lo, hi = float(g.min()), float(g.max())
        scale = (hi - lo) / 255.0
        pix = np.rint((g - lo) / (scale if scale > 0 else 1.0)).clip(0, 255).astype(np.uint8)
        png = stem.with_name(f"{stem.name}_level{m.level}.png")
        side = png.with_suffix(".json")
        meta = {"level": m.level, "offset": lo, "scale": scale, "units": "nats",
                "quantity": "nll - entropy, channel mean", "fourth_pixel": "group mean"}
        try:
            Image.fromarray(pix).save(png)
            side.write_text(json.dumps(meta, indent=2) + "\n")
        except OSError as exc:
            raise FormatError(f"cannot write map {png}: {exc}") from exc
        written.extend([png, side])
    return written


def load_exported_map(png_path) -> np.ndarray:
    from PIL import Image

    png_path = Path(png_path)
    meta = json.loads(png_path.with_suffix(".json").read_text())
    pix = np.asarray(Image.open(png_path), dtype=np.float64)
    return meta["offset"] + meta["scale"] * pix
