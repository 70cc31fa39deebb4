"""Scoring, ROC/AUC, balanced accuracy, thresholds and evaluation reports.

Convention: a larger score means "more likely synthetic"; an image is called
synthetic when its score is strictly greater than the threshold.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus_io import CorpusManifest, load_image, save_feature_table
from .errors import DataError, FormatError
from .features import N_LEVELS, image_features

MIN_CALIBRATION = 20


class StatisticChoice(enum.Enum):
    D0 = "d0"
    ABS_D0 = "abs_d0"
    DELTA01 = "delta01"
    ABS_DELTA01 = "abs_delta01"

    @classmethod
    def parse(cls, value) -> "StatisticChoice":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(c.value for c in cls)
            raise ValueError(f"unknown statistic {value!r}; choose one of {names}") from None

    def pick(self, stats) -> float:
        return getattr(stats, self.value)


def score(image, weights, choice) -> float:
    _, _, stats = image_features(weights, image)
    return StatisticChoice.parse(choice).pick(stats)


def _scores(values, what):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise DataError(f"no {what} scores")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite {what} score")
    return arr


@dataclass
class GroupResult:
    name: str
    n_real: int
    n_fake: int
    auc: float
    ba_at_threshold: float | None = None


@dataclass
class RocReport:
    """ROC curve from the highest threshold down; points start at (0, 0) and end at (1, 1)."""
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    n_real: int
    n_fake: int
    groups: list = field(default_factory=list)

    def trapezoid_auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def mann_whitney_auc(real, fake) -> float:
    """P(fake > real) + P(tie) / 2 via ranks of the pooled, sorted scores."""
    real = _scores(real, "real")
    fake = _scores(fake, "fake")
    pooled = np.concatenate([real, fake])
    sorted_vals = np.sort(pooled)
    # average 1-based rank of each value: ties share the mean of their positions
    lo = np.searchsorted(sorted_vals, fake, side="left")
    hi = np.searchsorted(sorted_vals, fake, side="right")
    rank_sum2 = int(np.sum(lo + hi + 1))  # twice the rank sum, kept integral
    n_r, n_f = real.size, fake.size
    u2 = rank_sum2 - n_f * (n_f + 1)
    return u2 / (2.0 * n_r * n_f)


def roc_auc(real_scores, fake_scores) -> RocReport:
    real = _scores(real_scores, "real")
    fake = _scores(fake_scores, "fake")
    thresholds = np.unique(np.concatenate([real, fake]))[::-1]
    rs, fs = np.sort(real), np.sort(fake)
    # at threshold t points with score >= t are flagged, sweeping t downward
    fp = real.size - np.searchsorted(rs, thresholds, side="left")
    tp = fake.size - np.searchsorted(fs, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / real.size])
    tpr = np.concatenate([[0.0], tp / fake.size])
    return RocReport(mann_whitney_auc(real, fake), fpr, tpr, int(real.size), int(fake.size))


def _ba_counts(rs, fs, thr):
    """Integer numerators: true negatives and true positives at each threshold."""
    tn = np.searchsorted(rs, thr, side="right")
    tp = fs.size - np.searchsorted(fs, thr, side="right")
    return tn, tp


def balanced_accuracy(real_scores, fake_scores, threshold) -> float:
    real = _scores(real_scores, "real")
    fake = _scores(fake_scores, "fake")
    tn = int(np.count_nonzero(real <= threshold))
    tp = int(np.count_nonzero(fake > threshold))
    return 0.5 * tn / real.size + 0.5 * tp / fake.size


@dataclass
class SweepResult:
    thresholds: np.ndarray
    accuracies: np.ndarray
    best_threshold: float
    best_accuracy: float

    def rows(self):
        return [(float(t), float(a)) for t, a in zip(self.thresholds, self.accuracies)]


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus one point outside each end."""
    u = np.unique(scores)
    mids = u[:-1] + (u[1:] - u[:-1]) / 2.0
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def threshold_sweep(real_scores, fake_scores, n_points=None) -> SweepResult:
    """Balanced accuracy over all candidate thresholds.

    The maximum is taken over every candidate; ties go to the smallest
    threshold. With ``n_points`` the returned curve is thinned to about that
    many evenly spaced candidates, always keeping the best one.
    """
    real = _scores(real_scores, "real")
    fake = _scores(fake_scores, "fake")
    rs, fs = np.sort(real), np.sort(fake)
    thr = candidate_thresholds(np.concatenate([rs, fs]))
    tn, tp = _ba_counts(rs, fs, thr)
    # compare exact rationals tn/nr + tp/nf through a common denominator
    key = tn.astype(np.int64) * fs.size + tp.astype(np.int64) * rs.size
    best = int(np.argmax(key))
    acc = 0.5 * tn / rs.size + 0.5 * tp / fs.size
    keep = np.arange(thr.size)
    if n_points is not None and thr.size > n_points:
        if n_points < 2:
            raise ValueError("n_points must be at least 2")
        keep = np.unique(np.concatenate([np.linspace(0, thr.size - 1, n_points).round().astype(int), [best]]))
    return SweepResult(thr[keep], acc[keep], float(thr[best]), float(acc[best]))


def calibrate_threshold(real_scores, target_fpr) -> float:
    """Order statistic of real-only scores giving empirical FPR at most ``target_fpr``."""
    real = _scores(real_scores, "real")
    if not 0.0 < target_fpr <= 0.5:
        raise ValueError(f"target_fpr must be in (0, 0.5], got {target_fpr}")
    n = real.size
    if n < MIN_CALIBRATION:
        raise DataError(f"calibration needs at least {MIN_CALIBRATION} real scores, got {n}")
    k = math.ceil((1.0 - target_fpr) * n - 1e-9)
    k = min(max(k, 1), n)
    return float(np.sort(real)[k - 1])


# -- corpus evaluation ---------------------------------------------------

def _record(entry, weights) -> dict:
    _, fv, st = image_features(weights, load_image(entry.path))
    row = {"path": str(entry.path), "label": entry.label, "generator": entry.generator, "group": entry.group}
    row.update(fv.as_dict())
    row.update(st.as_dict())
    return row


def feature_records(manifest: CorpusManifest, weights, progress=None, threads=1) -> list:
    """One feature-table row per manifest entry, in manifest order.

    With ``threads > 1`` images are scored concurrently; rows do not depend on
    the thread count.
    """
    entries = list(manifest)
    if threads <= 1:
        results = (_record(e, weights) for e in entries)
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(lambda e: _record(e, weights), entries)
    rows = []
    try:
        for i, row in enumerate(results):
            rows.append(row)
            if progress is not None:
                progress(i + 1, len(entries))
    finally:
        if threads > 1:
            pool.shutdown(cancel_futures=True)
    return rows


@dataclass
class Evaluation:
    statistic: StatisticChoice
    roc: RocReport
    sweep: SweepResult
    threshold: float
    threshold_source: str
    global_auc: float
    pooled_auc: float
    records: list
    seed: int | None = None

    @property
    def groups(self):
        return self.roc.groups


def evaluate_records(records, choice, threshold=None, seed=None) -> Evaluation:
    """Evaluation from precomputed feature rows (see ``feature_records``).

    Each group's fakes are compared with that group's reals. ``global_auc`` is
    the mean of the group AUCs; ``pooled_auc`` ignores groups.
    """
    choice = StatisticChoice.parse(choice)
    if not records:
        raise DataError("no records to evaluate")
    by_group = {}
    for r in records:
        by_group.setdefault(r["group"], []).append(r)
    labels = {r["label"] for r in records}
    if labels != {"real", "synthetic"}:
        raise DataError(f"evaluation needs both real and synthetic entries, found {sorted(labels)}")
    real_all = [float(r[choice.value]) for r in records if r["label"] == "real"]
    fake_all = [float(r[choice.value]) for r in records if r["label"] == "synthetic"]
    roc = roc_auc(real_all, fake_all)
    sweep = threshold_sweep(real_all, fake_all)
    source = "given"
    if threshold is None:
        threshold, source = sweep.best_threshold, "sweep-optimal"
    groups = []
    for name in sorted(by_group):
        rows = by_group[name]
        r = [float(x[choice.value]) for x in rows if x["label"] == "real"]
        f = [float(x[choice.value]) for x in rows if x["label"] == "synthetic"]
        if not r or not f:
            missing = "real" if not r else "synthetic"
            raise DataError(f"group {name!r} has no {missing} entries")
        groups.append(GroupResult(name, len(r), len(f), mann_whitney_auc(r, f),
                                  balanced_accuracy(r, f, threshold)))
    roc.groups = groups
    global_auc = float(np.mean([g.auc for g in groups]))
    return Evaluation(choice, roc, sweep, float(threshold), source, global_auc, roc.auc, list(records), seed)


def evaluate(manifest: CorpusManifest, weights, choice, threshold=None, seed=None, progress=None,
             threads=1) -> Evaluation:
    return evaluate_records(feature_records(manifest, weights, progress, threads), choice, threshold, seed)


def report_dict(ev: Evaluation) -> dict:
    return {
        "statistic": ev.statistic.value,
        "global_auc": ev.global_auc,
        "pooled_auc": ev.pooled_auc,
        "n_real": ev.roc.n_real,
        "n_fake": ev.roc.n_fake,
        "groups": [{"name": g.name, "n_real": g.n_real, "n_fake": g.n_fake, "auc": g.auc,
                    "ba_at_threshold": g.ba_at_threshold} for g in ev.groups],
        "threshold": ev.threshold,
        "threshold_source": ev.threshold_source,
        "max_balanced_accuracy": ev.sweep.best_accuracy,
        "seed": ev.seed,
        "sweep": [list(p) for p in ev.sweep.rows()],
    }


def gap_by_level(records) -> list:
    """Mean and standard deviation of each level's gap per (group, label)."""
    keyed = {}
    for r in records:
        keyed.setdefault((r["group"], r["label"]), []).append(r)
    rows = []
    for (group, label) in sorted(keyed):
        rs = keyed[(group, label)]
        for l in range(N_LEVELS):
            v = np.array([float(r[f"d{l}"]) for r in rs])
            rows.append({"group": group, "label": label, "level": l, "n": v.size,
                         "mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0})
    return rows


def _write_csv(path, header, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def write_sweep_csv(sweep: SweepResult, path) -> None:
    _write_csv(path, ("threshold", "balanced_accuracy"), sweep.rows())


def write_gap_csv(records, path) -> None:
    cols = ("group", "label", "level", "n", "mean", "std")
    _write_csv(path, cols, [[r[c] for c in cols] for r in gap_by_level(records)])


def write_histogram_csv(records, path, bins=20) -> None:
    """Per-label histograms of every decision statistic on shared bin edges."""
    rows = []
    for choice in StatisticChoice:
        vals = np.array([float(r[choice.value]) for r in records])
        edges = np.histogram_bin_edges(vals, bins=bins)
        for label in sorted({r["label"] for r in records}):
            v = np.array([float(r[choice.value]) for r in records if r["label"] == label])
            counts, _ = np.histogram(v, bins=edges)
            rows += [[choice.value, label, float(edges[i]), float(edges[i + 1]), int(c)]
                     for i, c in enumerate(counts)]
    _write_csv(path, ("statistic", "label", "bin_lo", "bin_hi", "count"), rows)


def sidecar_paths(report_path):
    p = Path(report_path)
    stem = p.with_suffix("")
    return {
        "sweep": stem.with_name(stem.name + "_sweep.csv"),
        "gap": stem.with_name(stem.name + "_gap_by_level.csv"),
        "features": stem.with_name(stem.name + "_features.csv"),
    }


def write_report(ev: Evaluation, report_path) -> list:
    """Report JSON plus sweep, gap-by-level and feature CSVs next to it."""
    report_path = Path(report_path)
    try:
        report_path.write_text(json.dumps(report_dict(ev), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot write report {report_path}: {exc}") from exc
    side = sidecar_paths(report_path)
    write_sweep_csv(ev.sweep, side["sweep"])
    write_gap_csv(ev.records, side["gap"])
    save_feature_table(ev.records, side["features"])
    return [report_path, *side.values()]
