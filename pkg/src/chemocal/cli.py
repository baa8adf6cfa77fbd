"""Command-line surface binding the pipeline end to end.

Subcommands: synth, preprocess, calibrate, predict, correct, diagnose,
density, report.  Exit codes: 0 success, 1 usage error, 2 data error.
All randomness flows from --seed; commands that generate data or fit
models require it explicitly.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import calib, correct, cube, density, diagnose, synth
from .errors import DataError
from .specprep import PIPELINE_CHOICES

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code (1, not argparse's 2)."""

    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_threads() -> int:
    raw = os.environ.get("CHEMOCAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chemocal",
                     description="Chemometric calibration toolkit for NIR "
                                 "hyperspectral grain analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="write a synthetic fixture")
    p.add_argument("--size", choices=sorted(synth.FIXTURE_SIZES), default="tiny")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deviation", default=None,
                   help="kernel deviation, e.g. normal:1.0 or skew_normal:5,0.5")
    p.add_argument("--subsamples-per-bulk", type=int, default=None)
    p.add_argument("--gain-sd", type=float, default=None)
    p.add_argument("--noise-sd", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="cubes -> subsample table")
    p.add_argument("--cubes", nargs="+", required=True,
                   help="raw cube payload paths (each with a JSON sidecar)")
    p.add_argument("--out", required=True)
    p.add_argument("--bulk-map", default=None,
                   help="CSV file,bulk_id,split[,fold]; default: bulk = file stem, split train")
    p.add_argument("--min-density", type=float, default=0.1)
    p.add_argument("--window", type=int, default=128)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--invert-mask", action="store_true",
                   help="grain is the darker class in band-mean reflectance")
    p.add_argument("--keep-reflectance", action="store_true",
                   help="skip the pseudo-absorbance conversion")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("calibrate", help="subsample table -> ensemble model JSON")
    p.add_argument("--subsamples", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("subsample", "bulk"), default="subsample")
    p.add_argument("--task", choices=("regression", "classification"),
                   default="regression")
    p.add_argument("--pipeline", choices=PIPELINE_CHOICES, default="snv_sg")
    p.add_argument("--components", default="auto",
                   help="latent variable count, or 'auto' for CV selection")
    p.add_argument("--max-components", type=int, default=30,
                   help="grid ceiling when --components auto")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="model + subsample table -> predictions CSV")
    p.add_argument("--subsamples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--external", default=None,
                   help="per-constituent predictions CSV in place of a fitted model")
    p.add_argument("--constituents", type=int, default=5,
                   help="constituent count for --external")
    p.add_argument("--bulk-means", action="store_true",
                   help="predict each bulk's weighted mean spectrum instead "
                        "of its subsamples")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("correct", help="bias/scale report and corrected test predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--source", choices=("train", "val", "both"), default="both")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("diagnose", help="per-bulk distribution normality report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("density", help="metric vs grain density sweeps")
    p.add_argument("--predictions", required=True)
    p.add_argument("--subsamples", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metric", choices=density.METRICS, default="rmse")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("report", help="run correct + diagnose + density together")
    p.add_argument("--predictions", required=True)
    p.add_argument("--subsamples", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--metric", choices=density.METRICS, default="rmse")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(args) -> int:
    overrides = {}
    if args.deviation is not None:
        overrides["deviation"] = synth.parse_deviation(args.deviation)
    if args.subsamples_per_bulk is not None:
        overrides["subsamples_per_bulk"] = args.subsamples_per_bulk
    if args.gain_sd is not None:
        overrides["scatter_gain_sd"] = args.gain_sd
    if args.noise_sd is not None:
        overrides["additive_noise_sd"] = args.noise_sd
    config = synth.SynthConfig(seed=args.seed,
                               **{**synth.FIXTURE_SIZES[args.size], **overrides})
    paths = synth.export_fixture(args.size, args.out, args.seed, config=config)
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return EXIT_OK


def _read_bulk_map(path: str) -> dict[str, tuple[str, str, int | None]]:
    out = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["file", "bulk_id", "split"]:
            raise DataError(f"{path}: expected header file,bulk_id,split[,fold]")
        for rec in reader:
            fold = None
            if len(rec) >= 4 and rec[3] != "":
                fold = int(rec[3])
            out[rec[0]] = (rec[1], rec[2], fold)
    return out


def cmd_preprocess(args) -> int:
    bulk_map = _read_bulk_map(args.bulk_map) if args.bulk_map else {}
    spec = cube.CropSpec(window=args.window, stride=args.stride,
                         min_density=args.min_density)
    subsamples = []
    for raw_path in args.cubes:
        loaded = cube.load_cube(raw_path)
        name = Path(raw_path).name
        bulk_id, split, fold = bulk_map.get(name, (Path(raw_path).stem, "train", None))
        mask = cube.otsu_mask(loaded, invert=args.invert_mask)
        if loaded.domain == cube.DOMAIN_REFLECTANCE and not args.keep_reflectance:
            loaded = cube.to_pseudo_absorbance(loaded)
        if loaded.bands == cube.RAW_BANDS:
            loaded = cube.spectral_bin(loaded)
        subsamples.extend(cube.crop(loaded, mask, spec, bulk_id=bulk_id,
                                    split=split, fold=fold))
    cube.write_subsample_csv(subsamples, args.out)
    print(f"wrote {args.out} ({len(subsamples)} subsamples)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    subsamples = cube.read_subsample_csv(args.subsamples)
    table = calib.load_references(args.references)
    threads = args.threads if args.threads is not None else _default_threads()
    if args.components == "auto":
        n_components = None
    else:
        try:
            n_components = int(args.components)
        except ValueError:
            raise DataError(f"--components must be an integer or 'auto', "
                            f"got {args.components!r}") from None
    task = ("discriminant" if args.task == "classification" else "regression")
    config = calib.ModelConfig(
        task=task, pipeline=args.pipeline, n_components=n_components,
        max_components=args.max_components, seed=args.seed)
    if args.mode == "bulk":
        ensemble = calib.fit_bulk_model(subsamples, table, args.folds, config, threads)
    else:
        ensemble = calib.fit_ensemble(subsamples, table, args.folds, config, threads)
    calib.save_ensemble(ensemble, args.out)
    print(f"wrote {args.out} ({ensemble.n_constituents} constituents, "
          f"{ensemble.level}-calibrated)")
    return EXIT_OK


def cmd_predict(args) -> int:
    subsamples = cube.read_subsample_csv(args.subsamples)
    if (args.model is None) == (args.external is None):
        raise DataError("predict needs exactly one of --model or --external")
    if args.external is not None:
        constituents = calib.load_external_predictions(args.external, args.constituents)
        fold_of_bulk = {ss.bulk_id: ss.fold for ss in subsamples
                        if ss.split != "test" and ss.fold is not None}
        if not fold_of_bulk:
            raise DataError("external predictions need fold labels on the subsamples")
        ensemble = calib.EnsembleModel(constituents, fold_of_bulk)
    else:
        ensemble = calib.load_ensemble(args.model)
    if args.bulk_means:
        pred_set = calib.bulk_level_prediction_set(ensemble, subsamples)
    else:
        pred_set = calib.predict_set(ensemble, subsamples)
    calib.write_prediction_csv(pred_set, args.out)
    print(f"wrote {args.out} ({len(pred_set)} rows)")
    return EXIT_OK


def cmd_correct(args) -> int:
    pred_set = calib.read_prediction_csv(args.predictions)
    table = calib.load_references(args.references)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = ("train", "val") if args.source == "both" else (args.source,)

    report = correct.correction_report(pred_set, table, sources=sources)
    correct.write_report_json(report, out_dir / "correction_report.json")
    aggregates = calib.aggregate_bulk_means(pred_set, table)
    calib.write_bulk_aggregate_csv(aggregates, out_dir / "bulk_aggregates.csv")

    corrected_rows = {}
    for source in sources:
        idx = [r for r in aggregates if r.split == source]
        fit = correct.ols_fit(np.array([r.yhat_mean for r in idx]),
                              np.array([r.y_ref for r in idx]),
                              source_split=source, level="bm")
        rows = correct.corrected_bulk_aggregates(aggregates, fit)
        calib.write_bulk_aggregate_csv(rows, out_dir / f"corrected_test_{source}.csv")
        corrected_rows[source] = rows

    if not args.no_plots:
        from . import plots
        plots.parity_plot(out_dir / "parity_bm.svg", aggregates, report["bm"],
                          title="bulk-mean predictions")
        for source in sources:
            plots.corrected_parity_plot(
                out_dir / f"parity_corrected_{source}.svg", corrected_rows[source],
                report["corrected_test"][f"{source}_sourced"]["rmse"], source)
    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    for split in ("train", "val", "test"):
        bm = report["bm"][split]
        print(f"{split}: rmse_bm={fmt(bm['rmse'])} syx_bm={fmt(bm['syx'])} "
              f"bias={fmt(bm['bias'])} scale={fmt(bm['scale'])}")
    for source in sources:
        corrected = report["corrected_test"][f"{source}_sourced"]
        print(f"test corrected ({source}): rmse_bm={corrected['rmse']:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    pred_set = calib.read_prediction_csv(args.predictions)
    table = calib.load_references(args.references)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = ("train", "val", "test") if args.split == "all" else (args.split,)
    for split in splits:
        rows = diagnose.per_bulk_report(pred_set, table, split)
        diagnose.write_distribution_csv(rows, out_dir / f"distribution_{split}.csv")
        tested = [r for r in rows if r.flag is None]
        rejected = sum(1 for r in tested if r.p_omnibus < args.alpha)
        print(f"{split}: {len(tested)} bulks tested, {rejected} rejected at "
              f"alpha={args.alpha:g}")
        if not args.no_plots and tested:
            from . import plots
            for family in ("skew", "kurt", "omnibus"):
                plots.distribution_plot(out_dir / f"distribution_{split}_{family}.svg",
                                        rows, family, args.alpha)
    return EXIT_OK


def cmd_density(args) -> int:
    pred_set = calib.read_prediction_csv(args.predictions)
    subsamples = cube.read_subsample_csv(args.subsamples)
    table = calib.load_references(args.references)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep = density.density_sweep(pred_set, subsamples, table, args.metric,
                                  split=args.split)
    density.write_binned_csv(sweep.bins, out_dir / "density_bins.csv")
    density.write_cumulative_csv(sweep.cumulative, out_dir / "density_cumulative.csv")
    if not args.no_plots:
        from . import plots
        plots.density_plot(out_dir / "density.svg", sweep)
    if sweep.bins:
        first = sweep.bins[0]
        print(f"lowest bin [{first.lo:.2f},{first.hi:.2f}]: "
              f"{args.metric}={first.mean:.4f} (n={first.count})")
    if sweep.cumulative:
        print(f"global {args.metric} (threshold {sweep.cumulative[0].lo:.2f}): "
              f"{sweep.cumulative[0].mean:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    ns = argparse.Namespace(**vars(args))
    ns.source = "both"
    code = cmd_correct(ns)
    if code != EXIT_OK:
        return code
    ns.split = "all"
    code = cmd_diagnose(ns)
    if code != EXIT_OK:
        return code
    ns.split = "test"
    return cmd_density(ns)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help (0) or usage error (1)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
