"""Command-line interface.

Subcommands: simulate, run, segment, evaluate, ab, corpus.
Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time as time_mod
from pathlib import Path

import numpy as np

from . import dataio, plots, sim, skyview
from .dataio import load_run_config
from .errors import CanyonNavError, DataError, NumericalError
from .pipeline import run_pipeline

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _cmd_simulate(args) -> int:
    traj = sim.TrajectorySpec(duration=args.duration, path=args.path)
    if args.preset == "canyon":
        scene = sim.SceneSpec(nlos_code_bias=args.nlos_bias)
    elif args.preset == "opensky":
        scene = sim.SceneSpec(cutoff_low=0.0, cutoff_high=0.0, open_bins=0,
                              nlos_code_bias=args.nlos_bias)
    elif args.preset == "perfect":
        scene = sim.zero_noise_scene()
    else:
        raise DataError(f"unknown preset {args.preset!r}")
    meta = sim.generate_scenario(traj, scene, args.seed, args.out)
    print(f"dataset written to {args.out} (seed {meta['seed']}, {args.duration:.0f} s)")
    return EXIT_OK


def _cmd_run(args) -> int:
    overrides = {"mode": args.mode, "seed": args.seed}
    if args.sndm is not None:
        overrides["sndm"] = args.sndm == "on"
    config = load_run_config(args.config, overrides)
    result = run_pipeline(config, args.out)
    meta = dataio.read_json(result.run_meta)
    line = f"run complete: mode={meta['mode']} sndm={meta['sndm']} -> {result.out_dir}"
    if meta.get("rmse"):
        r = meta["rmse"]
        line += (f" | RMSE E/N/U = {r['rmse_east']:.3f}/{r['rmse_north']:.3f}/"
                 f"{r['rmse_up']:.3f} m")
    print(line)
    return EXIT_OK


def _cmd_segment(args) -> int:
    images = sorted(Path(args.images).glob("*.png"))
    if not images:
        raise DataError(f"no PNG images under {args.images}")
    out = dataio.ensure_dir(args.out)
    masks_dir = dataio.ensure_dir(out / f"masks_{args.method}")
    truth_dir = Path(args.truth) if args.truth else None
    rng = np.random.default_rng(args.seed)

    accs = []
    t0 = time_mod.perf_counter()
    manifest = {}
    for img_path in images:
        img = dataio.read_image(img_path)
        mask = skyview.segment_baseline(img, args.method, rng=rng)
        rel = f"masks_{args.method}/{img_path.name}"
        dataio.write_mask_png(out / rel, mask.raster)
        manifest[img_path.stem] = rel
        if truth_dir is not None:
            truth = dataio.read_mask_png(truth_dir / img_path.name)
            accs.append(skyview.segmentation_accuracy(mask, truth))
    elapsed = time_mod.perf_counter() - t0
    fps = len(images) / elapsed if elapsed > 0 else float("inf")

    metrics = {"method": args.method, "n_images": len(images), "fps": fps,
               "elapsed_s": elapsed}
    if accs:
        accs_arr = np.array(accs)
        metrics["pixel_accuracy_mean"] = float(accs_arr.mean())
        metrics["pixel_accuracy_min"] = float(accs_arr.min())
        # image-level accuracy: images segmented correctly at the 95% level
        metrics["image_accuracy"] = float(np.mean(accs_arr >= 0.95))
    dataio.write_json(out / f"metrics_{args.method}.json", metrics)
    dataio.write_json(out / f"manifest_{args.method}.json", manifest)
    msg = f"{args.method}: {len(images)} images, {fps:.2f} FPS"
    if accs:
        msg += (f", pixel accuracy {metrics['pixel_accuracy_mean']:.4f}, "
                f"image-level {metrics['image_accuracy']:.4f}")
    print(msg)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    est = dataio.read_trajectory(args.estimate)
    truth = dataio.read_trajectory(args.truth)
    report = sim.compute_rmse(est, truth)
    print(f"RMSE East  : {report.rmse_east:.4f} m")
    print(f"RMSE North : {report.rmse_north:.4f} m")
    print(f"RMSE Up    : {report.rmse_up:.4f} m")
    print(f"matched epochs: {report.n_matched}")
    if args.out:
        out = dataio.ensure_dir(args.out)
        dataio.write_json(out / "error_report.json", report.to_dict())
        plots.plot_error_series(report, out / "error_series.png")
    return EXIT_OK


def _load_error_report(path) -> sim.ErrorReport:
    path = Path(path)
    if path.is_dir():
        path = path / "error_report.json"
    data = dataio.read_json(path)
    return sim.ErrorReport(data["rmse_east"], data["rmse_north"], data["rmse_up"],
                           data.get("n_matched", 0))


def _cmd_ab(args) -> int:
    baseline = _load_error_report(args.baseline)
    test = _load_error_report(args.test)
    imp = sim.ab_compare(baseline, test)
    print("axis   baseline   test       improvement")
    for axis, b, t, p in zip(("East", "North", "Up"),
                             (baseline.rmse_east, baseline.rmse_north, baseline.rmse_up),
                             (test.rmse_east, test.rmse_north, test.rmse_up), imp):
        print(f"{axis:<6} {b:8.3f} m {t:8.3f} m {p:6.1f}%")
    if args.out:
        dataio.write_json(args.out, {"improvement_east_pct": imp[0],
                                     "improvement_north_pct": imp[1],
                                     "improvement_up_pct": imp[2]})
    return EXIT_OK


def _cmd_corpus(args) -> int:
    pairs = sim.make_segmentation_corpus(args.n, args.kind, args.seed, args.out)
    print(f"{len(pairs)} {args.kind} images written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canyonnav",
                                description="GNSS/INS/vision fusion with sky-mask NLOS handling")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic urban-canyon dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=300.0)
    s.add_argument("--path", choices=["figure8", "grid"], default="figure8")
    s.add_argument("--preset", choices=["canyon", "opensky", "perfect"], default="canyon")
    s.add_argument("--nlos-bias", type=float, default=15.0)
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("run", help="run the fusion pipeline on a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["spp", "rtk"])
    s.add_argument("--sndm", choices=["on", "off"])
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("segment", help="run a classical sky segmentation baseline")
    s.add_argument("--images", required=True)
    s.add_argument("--method", choices=["otsu", "kmeans", "region_growth"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="directory of truth masks with matching names")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_segment)

    s = sub.add_parser("evaluate", help="ENU RMSE of a trajectory against truth")
    s.add_argument("--estimate", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("ab", help="improvement of one run over a baseline")
    s.add_argument("--baseline", required=True, help="error_report.json or run directory")
    s.add_argument("--test", required=True)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_ab)

    s = sub.add_parser("corpus", help="generate the synthetic segmentation corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["bimodal", "connected"], default="bimodal")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CanyonNavError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
