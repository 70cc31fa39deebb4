"""Image and corpus I/O.

Images are handled as ``uint8`` arrays of shape ``(height, width, 3)``.
Only PNG and binary PPM (P6, maxval 255) are read; JPEG sources have to be
converted beforehand.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .errors import FormatError, ManifestError

LABELS = ("real", "synthetic")
MANIFEST_COLUMNS = ("path", "label", "generator", "group")
FEATURE_COLUMNS = (
    "path", "label", "generator", "group",
    "nll0", "nll1", "nll2", "h0", "h1", "h2", "d0", "d1", "d2",
    "delta01", "abs_d0", "abs_delta01",
)
_NUMERIC_COLUMNS = FEATURE_COLUMNS[4:]


def as_rgb(img) -> np.ndarray:
    """Validate and return an image as a C-contiguous ``(H, W, 3)`` uint8 array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise FormatError("image samples must be 8-bit unsigned integers")
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)


# -- PPM -------------------------------------------------------------------

def _read_ppm(data: bytes, path) -> np.ndarray:
    tokens = []
    pos = 0
    n = len(data)
    # header: magic, width, height, maxval separated by whitespace/comments
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: only binary PPM (P6) is supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval} (need 255)")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    payload = data[pos:pos + expected]
    if len(payload) != expected or width <= 0 or height <= 0:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def _write_ppm(img: np.ndarray, fh) -> None:
    h, w, _ = img.shape
    fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
    fh.write(img.tobytes())


# -- PNG -------------------------------------------------------------------

def _read_png(data: bytes, path) -> np.ndarray:
    try:
        im = Image.open(io.BytesIO(data))
        im.load()
    except Exception as exc:
        raise FormatError(f"{path}: unreadable PNG ({exc})") from None
    if im.format != "PNG":
        raise FormatError(f"{path}: not a PNG file")
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I", "F") or "16" in mode:
        raise FormatError(f"{path}: unsupported bit depth (mode {mode}); only 8-bit images are accepted")
    if mode == "L":
        arr = np.asarray(im, dtype=np.uint8)
        return np.repeat(arr[:, :, None], 3, axis=2)
    if mode == "LA":
        arr = np.asarray(im, dtype=np.uint8)[:, :, 0]
        return np.repeat(arr[:, :, None], 3, axis=2)
    if mode in ("RGB", "RGBA"):
        return np.ascontiguousarray(np.asarray(im, dtype=np.uint8)[:, :, :3])
    if mode in ("P", "PA", "1"):
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise FormatError(f"{path}: unsupported PNG mode {mode}")


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or P6 PPM as ``(H, W, 3)`` uint8.

    Grayscale is replicated to three channels and alpha is dropped;
    16-bit inputs are rejected rather than requantized.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read file ({exc.strerror})") from None
    if data[:2] == b"P6":
        return _read_ppm(data, path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(data, path)
    raise FormatError(f"{path}: unsupported format (only PNG and binary PPM are read)")


def save_image(img, path) -> None:
    """Write an image; the format follows the suffix (``.ppm`` or ``.png``)."""
    img = as_rgb(img)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        with open(path, "wb") as fh:
            _write_ppm(img, fh)
    elif suffix == ".png":
        Image.fromarray(img).save(path, format="PNG")
    else:
        raise FormatError(f"{path}: unsupported output format {suffix!r}")


# -- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    generator: str = ""
    group: str = ""

    @property
    def is_real(self) -> bool:
        return self.label == "real"


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def with_label(self, label: str) -> "CorpusManifest":
        return CorpusManifest(tuple(e for e in self.entries if e.label == label))

    @property
    def groups(self) -> list[str]:
        return sorted({e.group for e in self.entries})


def make_manifest(entries: Iterable[ManifestEntry]) -> CorpusManifest:
    entries = tuple(entries)
    seen = set()
    for i, e in enumerate(entries, start=1):
        if e.label not in LABELS:
            raise ManifestError(f"entry {i}: label {e.label!r} not in {LABELS}")
        if e.path in seen:
            raise ManifestError(f"entry {i}: duplicate path {e.path!r}")
        seen.add(e.path)
    return CorpusManifest(entries)


def load_manifest(path) -> CorpusManifest:
    """Parse a ``path,label,generator,group`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc.strerror})") from None
    reader = csv.DictReader(io.StringIO(text, newline=""))
    header = reader.fieldnames or []
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ManifestError(f"{path}: missing header column(s) {', '.join(missing)}")
    entries = []
    seen = {}
    # row numbers count the header as row 1
    for rowno, row in enumerate(reader, start=2):
        label = (row["label"] or "").strip()
        if label not in LABELS:
            raise ManifestError(f"{path}: row {rowno}: label {label!r} must be one of {', '.join(LABELS)}")
        raw = (row["path"] or "").strip()
        if not raw:
            raise ManifestError(f"{path}: row {rowno}: empty path")
        resolved = os.path.normpath(raw if os.path.isabs(raw) else os.path.join(base, raw))
        if resolved in seen:
            raise ManifestError(f"{path}: row {rowno}: duplicate path {raw!r} (first at row {seen[resolved]})")
        seen[resolved] = rowno
        entries.append(ManifestEntry(resolved, label, (row["generator"] or "").strip(), (row["group"] or "").strip()))
    return CorpusManifest(tuple(entries))


def save_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest:
            w.writerow([e.path, e.label, e.generator, e.group])


# -- feature tables --------------------------------------------------------

def _fmt(value) -> str:
    return repr(float(value))  # shortest round-trip repr: >= 17 significant digits when needed


def save_feature_table(records: Iterable[Mapping], path) -> None:
    """Write feature rows with the fixed ``FEATURE_COLUMNS`` header.

    Each record is a mapping with every column name as key. Floats are written
    with their shortest exact ``repr``.
    """
    rows = list(records)
    for i, r in enumerate(rows):
        missing = [c for c in FEATURE_COLUMNS if c not in r]
        if missing:
            raise ValueError(f"record {i} is missing {', '.join(missing)}")
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: cannot write feature table ({exc.strerror})") from None
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_COLUMNS)
        for r in rows:
            w.writerow([str(r[c]) for c in FEATURE_COLUMNS[:4]] + [_fmt(r[c]) for c in _NUMERIC_COLUMNS])


def load_feature_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FEATURE_COLUMNS:
            raise FormatError(f"{path}: unexpected feature-table header")
        out = []
        for row in reader:
            rec = {c: row[c] for c in FEATURE_COLUMNS[:4]}
            rec.update({c: float(row[c]) for c in _NUMERIC_COLUMNS})
            out.append(rec)
    return out
