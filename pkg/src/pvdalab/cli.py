"""Command-line front end: ``pvdalab {generate,train,calibrate,ablate,plot}``.

Exit codes: 0 success, 2 validation error, 3 runtime/numeric error, 4 IO error.
Failures print a one-line JSON object on stderr.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import calibrated_class_weight, write_gamma_csv
from .config import load_config
from .data import generate_domain_pair, load_dataset, save_dataset
from .errors import ConfigError, FormatError, NumericalError
from .nn import save_checkpoint
from .trainer import VARIANTS, run_ablation_suite, train

log = logging.getLogger("pvdalab")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

SOURCE_FILE, TARGET_FILE = "source.pvda", "target.pvda"


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_matrix_csv(path):
    """Header row plus one float row per sample."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    try:
        values = np.array([[float(v) for v in row] for row in body], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{path}: non-numeric cell ({e})") from None
    if body and any(len(row) != len(header) for row in body):
        raise FormatError(f"{path}: ragged rows, header has {len(header)} columns")
    return header, values.reshape(len(body), len(header))


def write_matrix_csv(path, header, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.asarray(values, dtype=np.float64):
            w.writerow([f"{v:.17g}" for v in row])


def _datasets(cfg):
    if cfg.paths.source is None:
        return generate_domain_pair(cfg.data)
    return load_dataset(cfg.paths.source), load_dataset(cfg.paths.target)


def _out_dir(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg, args):
    out = _out_dir(cfg)
    src, tgt = generate_domain_pair(cfg.data)
    save_dataset(out / SOURCE_FILE, src)
    save_dataset(out / TARGET_FILE, tgt)
    write_json(
        out / "generate.json",
        {
            "config": cfg.to_dict(),
            "source": {"path": SOURCE_FILE, "samples": len(src)},
            "target": {"path": TARGET_FILE, "samples": len(tgt)},
        },
    )
    print(out / SOURCE_FILE)
    print(out / TARGET_FILE)


def cmd_train(cfg, args):
    if args.variant:
        cfg.train = replace(cfg.train, variant=args.variant)
    src, tgt = _datasets(cfg)
    out = _out_dir(cfg)
    report = train(cfg.train, src, tgt, cfg.model)
    doc = report.to_json_dict()
    doc["run_config"] = cfg.to_dict()
    write_json(out / "report.json", doc)
    write_gamma_csv(out / "gamma_trajectory.csv", report.snapshots, cfg.data.num_target_classes)
    save_checkpoint(out / "params.ckpt", report.params)
    if not args.no_plots:
        from .plotting import plot_train_report

        plot_train_report(doc, out)
    log.info("train: accuracy %.4f, outlier mass %.4f, %.1fs", report.final_accuracy, report.final_outlier_mass, report.wall_clock)
    print(json.dumps({"target_accuracy": report.final_accuracy, "outlier_mass": report.final_outlier_mass}))


def cmd_calibrate(cfg, args):
    _, probs = read_matrix_csv(args.predictions)
    _, feats = read_matrix_csv(args.features)
    if len(probs) != len(feats):
        raise ConfigError(f"predictions have {len(probs)} rows, features {len(feats)}", "features")
    calib = cfg.train.calibration
    cw, diag = calibrated_class_weight(probs, feats, calib, cfg.train.seed)
    doc = {
        "config": {"calibration": asdict(calib), "seed": cfg.train.seed},
        "raw": cw.raw,
        "normalized": cw.normalized,
        "diagnostics": {
            "cluster": diag["cluster"],
            "converged": diag["converged"],
            "k_reduced": diag["k_reduced"],
            "rows": len(probs),
        },
    }
    path = Path(args.output) if args.output else _out_dir(cfg) / "gamma.json"
    write_json(path, doc)
    print(path)


def cmd_ablate(cfg, args):
    src, tgt = _datasets(cfg)
    out = _out_dir(cfg)
    ab = cfg.ablate
    result = run_ablation_suite(cfg.train, src, tgt, ab.variants, ab.seeds, cfg.model, ab.k_values, ab.workers)
    doc = result.to_json_dict()
    doc["run_config"] = cfg.to_dict()
    write_json(out / "ablation.json", doc)
    _write_rows(out / "ablation.csv", result.rows)
    if result.k_sweep:
        _write_rows(out / "k_sweep.csv", result.k_sweep)
    if not args.no_plots:
        from .plotting import plot_ablation

        plot_ablation(doc, out)
    for row in result.rows + result.k_sweep:
        log.info("%-16s K=%d acc %.4f ± %.4f outlier %.4f", row["variant"], row["k"], row["accuracy_mean"], row["accuracy_std"], row["outlier_mass_mean"])
    print(out / "ablation.json")


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: f"{v:.17g}" if isinstance(v, float) else v for k, v in row.items()})


def cmd_plot(cfg, args):
    from .plotting import plot_ablation, plot_train_report

    try:
        doc = json.loads(Path(args.report).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{args.report}: invalid JSON ({e})") from None
    out = Path(args.output) if args.output else Path(args.report).parent
    if "rows" in doc and "k_sweep" in doc:
        written = plot_ablation(doc, out)
    elif "snapshots" in doc and "true_distribution" in doc:
        written = plot_train_report(doc, out)
    else:
        raise FormatError(f"{args.report}: neither a training nor an ablation report")
    for p in written:
        print(p)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="sets both data.seed and train.seed")
    common.add_argument("--out-dir", help="overrides out_dir")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, e.g. train.lr=0.01")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pvdalab", description="Partial video domain adaptation experiments on synthetic data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write a synthetic source/target pair")
    p = sub.add_parser("train", parents=[common], help="train one variant and write report, gamma CSV, checkpoint")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--no-plots", action="store_true")
    p = sub.add_parser("calibrate", parents=[common], help="calibrated class weight from prediction/feature CSVs")
    p.add_argument("--predictions", required=True, help="CSV, header row, one softmax row per target sample")
    p.add_argument("--features", required=True, help="CSV, header row, one fused-feature row per target sample")
    p.add_argument("--output", help="output JSON path (default: OUT_DIR/gamma.json)")
    p = sub.add_parser("ablate", parents=[common], help="variant x seed grid and optional K sweep")
    p.add_argument("--no-plots", action="store_true")
    p = sub.add_parser("plot", parents=[common], help="render SVG figures from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--output", help="directory for the figures (default: next to the report)")
    return parser


def _fail(code, exc, field=None):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if field is not None:
        err["field"] = field
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"data.seed={args.seed}", f"train.seed={args.seed}"]
        if args.out_dir is not None:
            overrides.append((["out_dir"], args.out_dir))
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        return _fail(EXIT_VALIDATION, e, e.field)
    except NumericalError as e:
        return _fail(EXIT_RUNTIME, e)
    except (FormatError, OSError) as e:
        return _fail(EXIT_IO, e)
    except ValueError as e:
        return _fail(EXIT_VALIDATION, e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
