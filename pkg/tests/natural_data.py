"""Natural photographs bundled with scikit-image, scikit-learn and matplotlib.

No photo dataset ships with the package, so the detection check builds its
corpus from these. Each photo is split by columns: the left part feeds
training crops, the right strip is held out for testing.
"""
import os

import numpy as np
from PIL import Image

CROP = 128
TRAIN_FRACTION = 0.7
MIN_STD = 4.0

SKIMAGE_PHOTOS = (
    "astronaut.png", "chelsea.png", "coffee.png", "hubble_deep_field.jpg", "ihc.png",
    "motorcycle_left.png", "retina.jpg", "rocket.jpg",
    "camera.png", "brick.png", "grass.png", "gravel.png", "moon.png", "coins.png",
    "cell.png", "clock_motion.png",
)


def photo_paths():
    paths = []
    try:
        import skimage
        base = os.path.join(os.path.dirname(skimage.__file__), "data")
        paths += [os.path.join(base, f) for f in SKIMAGE_PHOTOS]
    except ImportError:
        pass
    try:
        import sklearn.datasets
        base = os.path.join(os.path.dirname(sklearn.datasets.__file__), "images")
        paths += [os.path.join(base, f) for f in ("china.jpg", "flower.jpg")]
    except ImportError:
        pass
    try:
        import matplotlib
        paths.append(os.path.join(matplotlib.get_data_path(), "sample_data", "grace_hopper.jpg"))
    except ImportError:
        pass
    return [p for p in paths if os.path.exists(p)]


def load_photo(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _crops(img, stride):
    h, w = img.shape[:2]
    out = []
    for top in range(0, h - CROP + 1, stride):
        for left in range(0, w - CROP + 1, stride):
            c = img[top:top + CROP, left:left + CROP]
            # flat regions (black borders of scans) say nothing about either class
            if c.std() >= MIN_STD:
                out.append(np.ascontiguousarray(c))
    return out


def split_crops(train_stride=64, test_stride=64):
    """``(train_crops, test_crops)`` from disjoint column ranges of every photo."""
    train, test = [], []
    for p in photo_paths():
        img = load_photo(p)
        cut = int(img.shape[1] * TRAIN_FRACTION)
        train += _crops(img[:, :cut], train_stride)
        test += _crops(img[:, cut:], test_stride)
    return train, test


def bicubic_down_up(img):
    """2x bicubic downsampling followed by 2x bicubic upsampling."""
    h, w = img.shape[:2]
    im = Image.fromarray(img)
    small = im.resize((w // 2, h // 2), Image.Resampling.BICUBIC)
    return np.asarray(small.resize((w, h), Image.Resampling.BICUBIC))


def detection_sets():
    """Training crops plus held-out ``(real, synthetic)`` crop lists of equal size."""
    train, test = split_crops()
    real = test[0::2]
    synthetic = [bicubic_down_up(c) for c in test[1::2]]
    n = min(len(real), len(synthetic))
    return train, real[:n], synthetic[:n]
