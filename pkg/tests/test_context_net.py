import math

import numpy as np
import pytest

from costgap import mixture
from costgap.context_net import (
    WEIGHTS_MAGIC,
    ModelWeights,
    NetConfig,
    analyze_level,
    forward_level,
    init_weights,
    sample_level,
)
from costgap.errors import DataError, FormatError, NumericalError
from costgap.pyramid import build_pyramid
from conftest import random_image

TINY = NetConfig(n_components=2, trunk_depth=1, trunk_channels=4, head_width=8)


def point_mass_weights(config=TINY):
    """All weights zero; heads output mu = context value and the smallest scale."""
    w = init_weights(config, 0)
    K = config.n_components
    for name, t in w.tensors.items():
        t[...] = 0
        if name.endswith("fc2.bias"):
            t.reshape(3, 3, K)[:, 2, :] = mixture.LOG_SCALE_MIN
    return w


def level_inputs(img, level):
    pyr = build_pyramid(img)
    return pyr.y[level + 1], pyr.x[level]


def test_config_receptive_field():
    assert NetConfig().receptive_field == 9
    assert TINY.receptive_field == 3
    with pytest.raises(ValueError):
        NetConfig(n_components=0)


def test_init_deterministic():
    a, b = init_weights(TINY, 7), init_weights(TINY, 7)
    assert all(np.array_equal(a[n], b[n]) for n in a.tensors)
    c = init_weights(TINY, 8)
    assert any(not np.array_equal(a[n], c[n]) for n in a.tensors)


def test_init_shapes_follow_config():
    cfg = NetConfig()
    w = init_weights(cfg, 0)
    assert {n: t.shape for n, t in w.tensors.items()} == dict(cfg.tensor_shapes())
    assert all(t.dtype == np.float32 for t in w.tensors.values())


def test_initial_model_constant_image_nll():
    w = init_weights(NetConfig(), 0)
    img = np.full((32, 32, 3), 128, np.uint8)
    total, n = 0.0, 0
    for level in range(3):
        y, x = level_inputs(img, level)
        dist = analyze_level(w, level, y, x)
        nll = -mixture.log_pmf(dist.params, np.full(dist.params.batch_shape, 128))
        total += nll.sum()
        n += nll.size
    assert total / n < 6.0


def test_dimension_mismatch():
    w = init_weights(TINY, 0)
    with pytest.raises(DataError):
        analyze_level(w, 0, np.zeros((4, 4, 3), np.int32), np.zeros((6, 8, 3), np.uint8))


def test_constant_image_identical_params():
    w = init_weights(NetConfig(), 3)
    img = np.full((32, 32, 3), 77, np.uint8)
    y, x = level_inputs(img, 0)
    prm = analyze_level(w, 0, y, x).params
    for arr in (prm.weight_logits, prm.means, prm.log_scales):
        flat = arr.reshape(-1, *arr.shape[2:])
        assert np.all(flat == flat[0])


def test_locality(rng):
    cfg = NetConfig(n_components=3, trunk_depth=2, trunk_channels=8, head_width=16)
    w = init_weights(cfg, 0)
    img = random_image(rng, 64, 64)
    y, x = level_inputs(img, 0)
    base = analyze_level(w, 0, y, x).params
    y2 = y.copy()
    y2[20, 20] += 1
    changed = analyze_level(w, 0, y2, x).params
    diff = np.any(base.means != changed.means, axis=(2, 3, 4))
    radius = cfg.trunk_depth
    rows, cols = np.nonzero(diff)
    assert diff[20, 20]
    assert rows.min() >= 20 - radius and rows.max() <= 20 + radius
    assert cols.min() >= 20 - radius and cols.max() <= 20 + radius


def test_autoregressive_masking(rng):
    w = init_weights(NetConfig(), 1)
    img = random_image(rng, 32, 32)
    y, x = level_inputs(img, 0)
    base = analyze_level(w, 0, y, x).params
    x2 = x.copy()
    x2[0::2, 0::2] = 255 - x2[0::2, 0::2]  # every TL pixel
    p2 = analyze_level(w, 0, y, x2).params
    assert np.array_equal(base.means[:, :, 0], p2.means[:, :, 0])
    assert np.array_equal(base.log_scales[:, :, 0], p2.log_scales[:, :, 0])
    assert not np.array_equal(base.means[:, :, 1], p2.means[:, :, 1])
    assert not np.array_equal(base.means[:, :, 2], p2.means[:, :, 2])
    x3 = x.copy()
    x3[1::2, 1::2] = 255 - x3[1::2, 1::2]  # BR never enters any head
    p3 = analyze_level(w, 0, y, x3).params
    assert np.array_equal(base.means, p3.means)


def test_tr_feeds_bl_only(rng):
    w = init_weights(NetConfig(), 1)
    y, x = level_inputs(random_image(rng, 16, 16), 0)
    base = analyze_level(w, 0, y, x).params
    x2 = x.copy()
    x2[0::2, 1::2] ^= 0x55  # TR pixels
    p = analyze_level(w, 0, y, x2).params
    assert np.array_equal(base.means[:, :, :2], p.means[:, :, :2])
    assert not np.array_equal(base.means[:, :, 2], p.means[:, :, 2])
    x3 = x.copy()
    x3[1::2, 0::2] ^= 0x55  # BL pixels
    p = analyze_level(w, 0, y, x3).params
    assert np.array_equal(base.means, p.means)


def test_batch_equals_single(rng):
    w = init_weights(TINY, 0)
    imgs = [random_image(rng, 16, 16) for _ in range(3)]
    pyrs = [build_pyramid(i) for i in imgs]
    batched, _ = forward_level(w, 1, np.stack([p.y[2] for p in pyrs]), np.stack([p.x[1] for p in pyrs]))
    single, _ = forward_level(w, 1, pyrs[2].y[2][None], pyrs[2].x[1][None])
    m = single[0][0].shape[0]
    np.testing.assert_allclose(batched[1][1][2 * m:], single[1][1], rtol=1e-6, atol=1e-6)


def test_serialization_bit_exact(tmp_path, rng):
    w = init_weights(NetConfig(), 5)
    p = tmp_path / "w.bin"
    w.save(p)
    assert p.read_bytes()[:4] == WEIGHTS_MAGIC
    w2 = ModelWeights.load(p)
    assert w2.to_bytes() == w.to_bytes()
    assert w2.digest() == w.digest()
    y, x = level_inputs(random_image(rng, 16, 16), 0)
    a, b = analyze_level(w, 0, y, x).params, analyze_level(w2, 0, y, x).params
    assert np.array_equal(a.means, b.means) and np.array_equal(a.log_scales, b.log_scales)


def test_nonfinite_weights_rejected(tmp_path):
    w = init_weights(TINY, 0)
    w.tensors["level0.trunk0.bias"][0] = np.nan
    with pytest.raises(NumericalError):
        w.save(tmp_path / "w.bin")
    good = init_weights(TINY, 0).to_bytes()
    with pytest.raises(FormatError):
        ModelWeights.from_bytes(good[:-3])
    with pytest.raises(FormatError):
        ModelWeights.from_bytes(b"XXXX" + good[4:])


def test_sample_point_mass_deterministic():
    w = point_mass_weights()
    img = np.full((8, 8, 3), 90, np.uint8)
    y, _ = level_inputs(img, 0)
    outs = [sample_level(w, 0, y, seed)[0] for seed in range(4)]
    for o in outs:
        assert np.array_equal(o, img)


def test_sample_same_seed_identical(rng):
    w = init_weights(TINY, 0)
    y, _ = level_inputs(random_image(rng, 16, 16), 0)
    a, na = sample_level(w, 0, y, 11)
    b, nb = sample_level(w, 0, y, np.random.default_rng(11))
    assert np.array_equal(a, b) and na == nb


def test_sample_respects_block_sums(rng):
    w = init_weights(NetConfig(), 0)
    y, _ = level_inputs(random_image(rng, 32, 32), 1)
    out, n_clamped = sample_level(w, 1, y, 0)
    sums = out.astype(np.int32).reshape(8, 2, 8, 2, 3).sum(axis=(1, 3))
    ok = sums == y
    # every violated block sum corresponds to one clamped fourth pixel
    assert np.count_nonzero(~ok) == n_clamped


def test_point_mass_constant_params():
    w = point_mass_weights(NetConfig(n_components=3))
    img = np.full((16, 16, 3), 200, np.uint8)
    y, x = level_inputs(img, 0)
    prm = analyze_level(w, 0, y, x).params
    assert np.all(prm.means == 200.0)
    assert np.allclose(prm.log_scales, math.log(mixture.MIN_SCALE))
