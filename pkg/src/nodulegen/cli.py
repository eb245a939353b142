"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command takes
its randomness from --seed (or the config file), so reruns reproduce bit-for-
bit. Outputs only go to explicitly named paths.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import analyzer, dataset, metrics, net as netmod, pipeline, plots, voxel


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_triplet(raw: str, cast):
    parts = [cast(tok) for tok in raw.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got {raw!r}")
    return tuple(parts)


def _build_parser() -> _Parser:
    parser = _Parser(prog="nodulegen",
                     description="Synthetic 3D nodule-shape generator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("seeds", help="synthesize seed shapes into a directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", default=None, help="nz,ny,nx (default desk scale)")
    p.add_argument("--spacing", default=None, help="sz,sy,sx in mm")

    p = sub.add_parser("augment", help="expand a seed directory 16x")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config rng_seed")

    p = sub.add_parser("generate", help="decode random latents from weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=voxel.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)

    p = sub.add_parser("interpolate", help="walk the latent segment between "
                                           "two grid files")
    p.add_argument("--weights", required=True)
    p.add_argument("--grid-a", required=True)
    p.add_argument("--grid-b", required=True)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--threshold", type=float, default=voxel.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="filter a nodule directory against "
                                       "seed statistics")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--seeds", required=True, help="seed set directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=voxel.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", help="print the metrics row of a finished run")
    p.add_argument("--run", required=True)

    p = sub.add_parser("sweep", help="average repeated runs over bottleneck "
                                     "sizes")
    p.add_argument("--config", required=True)
    p.add_argument("--bottlenecks", default="2,3,4,8")
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference "
                                         "gradients on random small nets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)

    p = sub.add_parser("export-montage", help="middle-8-slice PGM of a grid "
                                              "file (or a single z slice)")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slice", type=int, default=None)

    return parser


def _cmd_seeds(args) -> int:
    dims = _parse_triplet(args.dims, int) if args.dims else voxel.DESK_SCALE_DIMS
    spacing = (_parse_triplet(args.spacing, float) if args.spacing
               else voxel.DEFAULT_SPACING)
    seeds = dataset.synth_seeds(args.count, dims, spacing, rng_seed=args.seed)
    manifest = dataset.save_set(seeds, args.out)
    print(f"wrote {len(seeds)} seeds to {args.out} ({manifest.name})")
    return 0


def _cmd_augment(args) -> int:
    seeds = dataset.load_set(args.in_dir)
    base = dataset.augment(seeds)
    dataset.save_set(base, args.out)
    print(f"augmented {len(seeds)} -> {len(base)} records in {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = pipeline.load_config(args.config)
    if args.seed is not None:
        config = replace(config, rng_seed=args.seed)
    report = pipeline.run(config, args.out)
    if report.failed:
        print(f"run failed: {report.error}", file=sys.stderr)
        return 2
    for summary in report.rounds:
        print(f"segment {summary.segment}: {summary.iterations} iters on "
              f"{summary.training_size} images (+{summary.injected} feedback), "
              f"loss {summary.loss_start:.5f} -> {summary.loss_end:.5f}")
    print(metrics.format_table_row(report.metrics, label=config.label))
    return 0


def _cmd_generate(args) -> int:
    network = netmod.load_network(args.weights)
    result = pipeline.generate(network, args.count, rng_seed=args.seed,
                               threshold=args.threshold)
    dataset.save_set(result.nodules, args.out)
    print(f"generated {result.count} nodules: {result.clean_count} clean, "
          f"{result.count - result.clean_count} repaired, "
          f"{result.inverted_count} inverted -> {args.out}")
    return 0


def _cmd_interpolate(args) -> int:
    network = netmod.load_network(args.weights)
    grid_a = voxel.load_grid(args.grid_a)
    grid_b = voxel.load_grid(args.grid_b)
    steps = pipeline.interpolate(network, grid_a, grid_b, args.steps,
                                 threshold=args.threshold)
    out = Path(args.out)
    dataset.save_set(steps, out)
    for i, rec in enumerate(steps):
        voxel.write_pgm_montage(rec.grid, out / f"step_{i}.pgm")
    plots.save_montage_figure(steps.grids(), out / "interpolation.png",
                              labels=[f"step {i}" for i in range(len(steps))])
    print(f"wrote {len(steps)} interpolation steps to {out}")
    return 0


def _cmd_analyze(args) -> int:
    seeds = dataset.load_set(args.seeds)
    stats = analyzer.compute_seed_stats(
        analyzer.features_of(seeds, args.threshold))
    nodules = dataset.load_set(args.in_dir)
    rows, kept, _ = analyzer.analyze_records(nodules.records, stats,
                                             rng_seed=args.seed,
                                             threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analyzer.write_features_csv(rows, out / "features.csv")
    analyzer.save_stats(stats, out / "seed_stats.json")
    if kept:
        dataset.save_set(dataset.set_from_records(kept), out / "accepted")
    frac = len(kept) / len(nodules) if len(nodules) else 0.0
    print(f"accepted {len(kept)}/{len(nodules)} ({100.0 * frac:.1f}%) "
          f"-> {out}")
    return 0


def _cmd_score(args) -> int:
    report = metrics.read_report_csv(Path(args.run) / "metrics.csv")
    print(metrics.format_table_row(report, label=Path(args.run).name))
    return 0


def _cmd_sweep(args) -> int:
    base_config = pipeline.load_config(args.config)
    bottlenecks = [int(tok) for tok in args.bottlenecks.split(",")]
    configs = []
    for width in bottlenecks:
        spec = list(base_config.layer_spec)
        spec[min(range(len(spec)), key=spec.__getitem__)] = width
        configs.append(replace(base_config, layer_spec=tuple(spec)))
    rows = pipeline.sweep(configs, repeats=args.repeats, out_dir=args.out)
    header = ["mse(x1000)" if f == "mse" else f for f in pipeline.SWEEP_FIELDS]
    print(" | ".join(header))
    for row in rows:
        print(f"{row.label} | {row.ac:.3f} | {1000.0 * row.mse:.3f} | "
              f"{row.ft_dist:.3f} | {row.ft_mmse:.3f} | {row.score:.2f} | "
              f"{row.runs_ok} | {row.failures}")
    print(f"sweep artifacts in {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = netmod.gradient_check(rng_seed=args.seed, trials=args.trials)
    print(f"max relative gradient error over {args.trials} nets: {worst:.3e}")
    return 0 if worst < 1e-4 else 2


def _cmd_export_montage(args) -> int:
    grid = voxel.load_grid(args.in_path)
    if args.slice is not None:
        voxel.write_pgm_slice(grid, args.slice, args.out)
    else:
        voxel.write_pgm_montage(grid, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "seeds": _cmd_seeds,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "interpolate": _cmd_interpolate,
    "analyze": _cmd_analyze,
    "score": _cmd_score,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "export-montage": _cmd_export_montage,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
