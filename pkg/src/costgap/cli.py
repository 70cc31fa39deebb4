"""Command-line entry point: ``costgap <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import codec
from .context_net import ModelWeights, NetConfig
from .corpus_io import (
    LABELS,
    ManifestEntry,
    load_feature_table,
    load_image,
    load_manifest,
    make_manifest,
    save_feature_table,
    save_image,
)
from .detector_eval import (
    StatisticChoice,
    calibrate_threshold,
    evaluate_records,
    feature_records,
    threshold_sweep,
    write_gap_csv,
    write_histogram_csv,
    write_report,
    write_sweep_csv,
)
from .errors import DataError, NumericalError
from .features import export_maps, image_features
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

SCHEMAS = """\
file formats:
  images      PNG (8-bit gray, RGB or RGBA; gray is replicated, alpha dropped)
              or binary PPM (P6, maxval 255). Convert JPEG and other formats
              offline first, e.g.
                python3 -c "import sys; from PIL import Image; Image.open(sys.argv[1]).convert('RGB').save(sys.argv[2])" in.jpg out.png
              Images are center-cropped to multiples of 8 before analysis.
  manifest    UTF-8 CSV with header path,label,generator,group. label is
              "real" or "synthetic"; relative paths resolve against the
              manifest's directory; generator and group may be empty. Each
              group's synthetic rows are compared with that group's real rows.
  features    CSV with header path,label,generator,group,nll0,nll1,nll2,
              h0,h1,h2,d0,d1,d2,delta01,abs_d0,abs_delta01 (nats per coded
              pixel and channel; dL = nllL - hL, delta01 = d0 - d1).
  weights     binary: b"ZEDW", u16 version, u32 x5 network config
              (components, trunk depth, trunk channels, head width, levels),
              u32 tensor count, then per tensor u16 name length, UTF-8 name,
              u8 rank, u32 dims, little-endian float32 data.
  train log   JSON lines {"step", "loss", "level_losses"} and a final
              {"final": true, "initial_nll", "final_nll", "wall_time"}.
  report      JSON {statistic, global_auc (mean of group AUCs), pooled_auc,
              n_real, n_fake, groups: [{name, n_real, n_fake, auc,
              ba_at_threshold}], threshold, threshold_source,
              max_balanced_accuracy, seed, sweep: [[threshold, accuracy], ...]}
              with sidecars <stem>_sweep.csv (threshold,balanced_accuracy),
              <stem>_gap_by_level.csv (group,label,level,n,mean,std) and
              <stem>_features.csv (features schema).
  bitstream   b"ZEDC", u16 version, u32 width, u32 height, 32-byte SHA-256 of
              the weights file, raw level-3 pixels, 2-bit rounding codes of
              levels 3,2,1, u32 length, range-coded pixels of levels 2,1,0,
              u32 CRC-32 of the bytes between header and checksum.
  config      --config FILE with "key = value" lines and "#" comments; keys
              are the long option names of the subcommand (dashes or
              underscores). Precedence: defaults < config file < flags.
  scores      larger means more likely synthetic; score > threshold is
              classified synthetic.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# option name -> (type, default, help); None default means required unless noted
_COMMON = {
    "seed": (int, 0, "random seed (unsigned 64-bit), recorded in reports"),
    "threads": (int, 1, "worker threads for scoring images"),
}

_STAT_HELP = "decision statistic: " + ", ".join(c.value for c in StatisticChoice)

COMMANDS = {
    "train": ("fit a model on the real entries of a manifest", {
        "manifest": (str, None, "training manifest (all rows must be real)"),
        "out": (str, None, "output weights file"),
        "log_out": (str, "", "training log (JSON lines); default <out>.train.jsonl"),
        "steps": (int, TrainConfig.steps, "optimizer steps"),
        "batch_size": (int, TrainConfig.batch_size, "crops per step"),
        "crop_size": (int, TrainConfig.crop_size, "training crop side (multiple of 8)"),
        "learning_rate": (float, TrainConfig.learning_rate, "Adam step size"),
        "n_components": (int, NetConfig.n_components, "logistic components per mixture"),
        "trunk_depth": (int, NetConfig.trunk_depth, "conv layers per level"),
        "trunk_channels": (int, NetConfig.trunk_channels, "conv channels"),
        "head_width": (int, NetConfig.head_width, "hidden width of the prediction heads"),
    }),
    "analyze": ("write the feature row and optional cost-gap maps of one image", {
        "weights": (str, None, "weights file"),
        "image": (str, None, "input image"),
        "features_out": (str, None, "feature CSV to write (one row)"),
        "maps_out": (str, "", "directory for per-level PNG maps and JSON sidecars"),
        "label": (str, "real", "label column of the written row"),
    }),
    "score": ("print <path>\\t<stat>\\t<score> for each image", {
        "weights": (str, None, "weights file"),
        "stat": (str, StatisticChoice.ABS_DELTA01.value, _STAT_HELP),
    }),
    "calibrate": ("threshold from the real entries of a manifest at a target false-positive rate", {
        "weights": (str, None, "weights file"),
        "manifest": (str, None, "manifest; only real rows are used"),
        "target_fpr": (float, 0.05, "target false-positive rate in (0, 0.5]"),
        "stat": (str, StatisticChoice.ABS_DELTA01.value, _STAT_HELP),
        "out": (str, "", "optional JSON file for the result"),
    }),
    "evaluate": ("AUC, balanced accuracy and threshold sweep over a labeled manifest", {
        "weights": (str, None, "weights file"),
        "manifest": (str, None, "labeled manifest"),
        "stat": (str, StatisticChoice.ABS_DELTA01.value, _STAT_HELP),
        "threshold": (float, "", "decision threshold; default: sweep optimum"),
        "report_out": (str, None, "report JSON (sidecar CSVs are written next to it)"),
    }),
    "compress": ("losslessly encode an image", {
        "weights": (str, None, "weights file"),
        "image": (str, None, "input image (cropped to multiples of 8 first)"),
        "out": (str, None, "output bitstream"),
    }),
    "decompress": ("decode a bitstream", {
        "weights": (str, None, "weights file used for encoding"),
        "input": (str, None, "bitstream"),
        "out": (str, None, "output image (.png or .ppm)"),
    }),
    "report": ("histogram, sweep and gap-by-level data files from a feature table", {
        "features": (str, None, "feature CSV (e.g. an evaluate sidecar)"),
        "out": (str, None, "output directory"),
        "stat": (str, StatisticChoice.ABS_DELTA01.value, _STAT_HELP),
    }),
}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> _Parser:
    parser = _Parser(prog="costgap", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=SCHEMAS)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for cmd, (summary, opts) in COMMANDS.items():
        p = sub.add_parser(cmd, help=summary, description=summary, epilog=SCHEMAS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if cmd == "score":
            p.add_argument("images", nargs="+", help="images to score")
        p.add_argument("--config", default=argparse.SUPPRESS, help="key = value configuration file")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
        for name, (typ, default, help_) in {**opts, **_COMMON}.items():
            shown = "required" if default is None else f"default {default!r}" if default != "" else "optional"
            p.add_argument(_flag(name), dest=name, type=typ, default=argparse.SUPPRESS,
                           help=f"{help_} ({shown})")
    return parser


def read_config(path, opts) -> dict:
    """Parse ``key = value`` lines; unknown keys are usage errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in opts:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = opts[key][0](value)
        except ValueError:
            raise UsageError(f"{path}:{n}: bad value {value!r} for {key}") from None
    return out


def resolve_options(cmd, ns) -> dict:
    opts = {**COMMANDS[cmd][1], **_COMMON}
    values = {k: v[1] for k, v in opts.items()}
    given = vars(ns)
    if "config" in given:
        values.update(read_config(given["config"], opts))
    values.update({k: v for k, v in given.items() if k in opts})
    missing = [_flag(k) for k, v in values.items() if v is None]
    if missing:
        raise UsageError(f"costgap {cmd}: missing required option(s) {', '.join(missing)}")
    if not 0 <= values["seed"] < 2 ** 64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    if values["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    if "stat" in values:
        try:
            values["stat"] = StatisticChoice.parse(values["stat"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    values["images"] = given.get("images", [])
    return values


def _cmd_train(o):
    manifest = load_manifest(o["manifest"])
    try:
        tc = TrainConfig(crop_size=o["crop_size"], batch_size=o["batch_size"], steps=o["steps"],
                         learning_rate=o["learning_rate"], seed=o["seed"])
        nc = NetConfig(n_components=o["n_components"], trunk_depth=o["trunk_depth"],
                       trunk_channels=o["trunk_channels"], head_width=o["head_width"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    weights, report = train(manifest, tc, nc)
    weights.save(o["out"])
    report.write_jsonl(o["log_out"] or str(o["out"]) + ".train.jsonl")
    print(f"{o['out']}\tsteps={tc.steps}\tseed={tc.seed}\tfinal_nll={report.final_nll:.6f}")


def _cmd_analyze(o):
    if o["label"] not in LABELS:
        raise UsageError(f"--label must be one of {LABELS}")
    weights = ModelWeights.load(o["weights"])
    maps, fv, st = image_features(weights, load_image(o["image"]))
    row = {"path": o["image"], "label": o["label"], "generator": "", "group": ""}
    row.update(fv.as_dict())
    row.update(st.as_dict())
    save_feature_table([row], o["features_out"])
    if o["maps_out"]:
        out_dir = Path(o["maps_out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        export_maps(maps, out_dir / Path(o["image"]).stem)


def _cmd_score(o):
    weights = ModelWeights.load(o["weights"])
    unique = list(dict.fromkeys(o["images"]))
    rows = feature_records(make_manifest(ManifestEntry(p, "real") for p in unique), weights, threads=o["threads"])
    by_path = dict(zip(unique, rows))
    for path in o["images"]:
        print(f"{path}\t{o['stat'].value}\t{by_path[path][o['stat'].value]!r}")


def _cmd_calibrate(o):
    weights = ModelWeights.load(o["weights"])
    real = load_manifest(o["manifest"]).with_label("real")
    rows = feature_records(real, weights, threads=o["threads"])
    scores = [r[o["stat"].value] for r in rows]
    try:
        thr = calibrate_threshold(scores, o["target_fpr"])
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc)) from None
    fpr = sum(s > thr for s in scores) / len(scores)
    result = {"statistic": o["stat"].value, "target_fpr": o["target_fpr"], "threshold": thr,
              "empirical_fpr": fpr, "n_real": len(scores), "seed": o["seed"]}
    if o["out"]:
        Path(o["out"]).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"{o['stat'].value}\t{thr!r}\tempirical_fpr={fpr!r}")


def _cmd_evaluate(o):
    weights = ModelWeights.load(o["weights"])
    manifest = load_manifest(o["manifest"])
    rows = feature_records(manifest, weights, threads=o["threads"])
    thr = None if o["threshold"] == "" else o["threshold"]
    ev = evaluate_records(rows, o["stat"], thr, seed=o["seed"])
    write_report(ev, o["report_out"])
    print(f"{o['stat'].value}\tglobal_auc={ev.global_auc:.6f}\tthreshold={ev.threshold!r}")


def _cmd_compress(o):
    from .pyramid import crop_to_multiple_of_8
    weights = ModelWeights.load(o["weights"])
    img = crop_to_multiple_of_8(load_image(o["image"]))
    bs = codec.encode(img, weights)
    Path(o["out"]).write_bytes(bs.to_bytes())
    n = img.shape[0] * img.shape[1] * 3
    print(f"{o['out']}\t{len(bs.to_bytes())} bytes\t{8 * len(bs.to_bytes()) / n:.4f} bits/sample")


def _cmd_decompress(o):
    weights = ModelWeights.load(o["weights"])
    try:
        data = Path(o["input"]).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {o['input']}: {exc.strerror}") from None
    save_image(codec.decode(data, weights), o["out"])


def _cmd_report(o):
    rows = load_feature_table(o["features"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_histogram_csv(rows, out / "histograms.csv")
    write_gap_csv(rows, out / "gap_by_level.csv")
    stat = o["stat"].value
    real = [r[stat] for r in rows if r["label"] == "real"]
    fake = [r[stat] for r in rows if r["label"] == "synthetic"]
    if real and fake:
        write_sweep_csv(threshold_sweep(real, fake), out / f"sweep_{stat}.csv")


HANDLERS = {
    "train": _cmd_train, "analyze": _cmd_analyze, "score": _cmd_score, "calibrate": _cmd_calibrate,
    "evaluate": _cmd_evaluate, "compress": _cmd_compress, "decompress": _cmd_decompress,
    "report": _cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage())
        opts = resolve_options(ns.command, ns)
        if getattr(ns, "verbose", False):
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        HANDLERS[ns.command](opts)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())
