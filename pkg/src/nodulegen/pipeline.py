"""End-to-end orchestration: train, generate + repair, filter, score.

A run is fully determined by its TrainConfig: all randomness is fanned out
from the single rng_seed, so identical configs give bit-identical weights,
accepted sets, and scores.
"""
from __future__ import annotations

import csv
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analyzer, dataset, metrics, net as netmod, plots, voxel
from .dataset import NoduleRecord, NoduleSet
from .metrics import GenerationCounts, MetricsReport
from .net import Network
from .voxel import (DEFAULT_SPACING, DEFAULT_THRESHOLD, DESK_SCALE_DIMS,
                    VoxelGrid, binarize, label_components, reconnect)

FEEDBACK_MODES = ("none", "one_reflection")


def derive_seed(*parts: int) -> int:
    """Stable child seed from integer tags (for per-stage rng fan-out)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    layer_spec: tuple[int, ...] = (32, 3, 64, 256)
    dims: tuple[int, int, int] = DESK_SCALE_DIMS
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    total_iterations: int = 3000
    feedback_mode: str = "none"
    # (iterations, inject_before) per training segment
    feedback_rounds: tuple[tuple[int, bool], ...] | None = None
    batch_size: int = 64
    rng_seed: int = 0
    generation_batch: int = 400
    seed_count: int = 20
    seeds_dir: str | None = None
    learning_rate: float = 1e-3
    threshold: float = DEFAULT_THRESHOLD
    bottleneck_index: int | None = None

    def __post_init__(self):
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ValueError(f"unknown feedback mode {self.feedback_mode!r}")
        rounds = self.feedback_rounds
        if rounds is None:
            rounds = ((self.total_iterations, False),)
        rounds = tuple((int(n), bool(flag)) for n, flag in rounds)
        if sum(n for n, _ in rounds) != self.total_iterations:
            raise ValueError("segment iterations must sum to total_iterations")
        if any(n < 1 for n, _ in rounds):
            raise ValueError("every segment needs at least one iteration")
        if self.feedback_mode == "none":
            if len(rounds) != 1 or rounds[0][1]:
                raise ValueError("feedback mode 'none' implies a single "
                                 "segment with no injection")
        object.__setattr__(self, "feedback_rounds", rounds)
        object.__setattr__(self, "layer_spec",
                           tuple(int(n) for n in self.layer_spec))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing",
                           tuple(float(s) for s in self.spacing))

    @property
    def arch_name(self) -> str:
        return "_".join(str(n) for n in self.layer_spec)

    @property
    def label(self) -> str:
        return f"{self.arch_name}:{self.feedback_mode}"


def _format_value(name: str, value) -> str:
    if value is None:
        return ""
    if name == "feedback_rounds":
        return ",".join(f"{n}:{int(flag)}" for n, flag in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def save_config(config: TrainConfig, path) -> None:
    lines = [f"{f.name} = {_format_value(f.name, getattr(config, f.name))}"
             for f in fields(config)]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    if name == "layer_spec":
        sep = "_" if "_" in raw else ","
        return tuple(int(t) for t in raw.split(sep))
    if name in ("dims",):
        return tuple(int(t) for t in raw.split(","))
    if name in ("spacing",):
        return tuple(float(t) for t in raw.split(","))
    if name == "feedback_rounds":
        rounds = []
        for item in raw.split(","):
            n, flag = item.split(":")
            rounds.append((int(n), bool(int(flag))))
        return tuple(rounds)
    if name in ("total_iterations", "batch_size", "rng_seed",
                "generation_batch", "seed_count", "bottleneck_index"):
        return int(raw)
    if name in ("learning_rate", "threshold"):
        return float(raw)
    if name == "feedback_mode":
        return raw
    if name == "seeds_dir":
        return raw
    raise KeyError(name)


def load_config(path) -> TrainConfig:
    """Flat `key = value` config file; unknown keys are rejected."""
    known = {f.name for f in fields(TrainConfig)}
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        value = _parse_value(key, raw)
        if value is not None:
            kwargs[key] = value
    return TrainConfig(**kwargs)


@dataclass(frozen=True)
class GenerationResult:
    """A generated batch with its pre-repair bookkeeping flags."""

    nodules: NoduleSet
    clean: tuple[bool, ...]     # single component before repair
    inverted: tuple[bool, ...]  # majority-on decode, left unrepaired

    @property
    def count(self) -> int:
        return len(self.nodules)

    @property
    def clean_count(self) -> int:
        return sum(self.clean)

    @property
    def inverted_count(self) -> int:
        return sum(self.inverted)


def generate(net: Network, count: int, rng_seed: int = 0,
             threshold: float = DEFAULT_THRESHOLD) -> GenerationResult:
    """Decode `count` uniform random latent points and repair connectivity.

    Every emitted grid is single-component at the threshold: multi-component
    decodes are reconnected, and an all-background decode gets its strongest
    voxel turned on. Inverted decodes (more than half the voxels on, a
    polarity-flip pathology of the generator) are flagged for reporting but
    repaired like everything else; the acceptance filter deals with them.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([rng_seed, 0x6E])
    records, clean_flags, inverted_flags = [], [], []
    for i in range(count):
        latent = netmod.sample_latent(net.latent_dim, rng)
        grid = netmod.decode(net, latent)
        mask = binarize(grid, threshold)
        if mask.on_count == 0:
            vals = np.array(grid.values)
            vals[np.unravel_index(np.argmax(vals), vals.shape)] = 1.0
            grid = grid.with_values(vals)
            mask = binarize(grid, threshold)
        inverted = mask.on_count > grid.voxel_count / 2
        clean = label_components(mask).component_count == 1
        if not clean:
            grid = reconnect(grid, threshold)
        records.append(NoduleRecord(grid, "generated", f"gen{rng_seed}:{i:04d}"))
        clean_flags.append(clean)
        inverted_flags.append(inverted)
    nodules = NoduleSet(tuple(records), net.dims, net.spacing)
    return GenerationResult(nodules, tuple(clean_flags), tuple(inverted_flags))


def interpolate(net: Network, seed_a: VoxelGrid, seed_b: VoxelGrid,
                steps: int, threshold: float = DEFAULT_THRESHOLD) -> NoduleSet:
    """Evenly spaced latent-segment walk between two encoded shapes.

    Both endpoints are included, so step 0 and step `steps`-1 are exactly the
    two autoencoder reconstructions (single-component reconstructions pass
    through the repair untouched).
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    za = netmod.encode(net, seed_a)
    zb = netmod.encode(net, seed_b)
    records = []
    for i, t in enumerate(np.linspace(0.0, 1.0, steps)):
        if t == 0.0:
            z = za
        elif t == 1.0:
            z = zb
        else:
            z = za + t * (zb - za)
        grid = netmod.decode(net, z)
        mask = binarize(grid, threshold)
        if mask.on_count > 0 and label_components(mask).component_count > 1:
            grid = reconnect(grid, threshold)
        records.append(NoduleRecord(grid, "generated", f"interp:{i}"))
    return NoduleSet(tuple(records), net.dims, net.spacing)


def latent_scatter(net: Network, seeds: NoduleSet,
                   dims: tuple[int, int] = (0, 1)) -> tuple[np.ndarray, np.ndarray]:
    """Per-seed coordinates in two latent dimensions plus their variances."""
    d0, d1 = dims
    if not (0 <= d0 < net.latent_dim and 0 <= d1 < net.latent_dim):
        raise ValueError(f"latent dims {dims} out of range for "
                         f"{net.latent_dim} bottleneck neurons")
    codes = netmod.encode_batch(net, seeds.to_matrix())
    points = codes[:, [d0, d1]]
    return points, points.var(axis=0)


@dataclass(frozen=True)
class RoundSummary:
    segment: int
    iterations: int
    training_size: int
    injected: int
    loss_start: float
    loss_end: float


@dataclass
class RunReport:
    config: TrainConfig
    metrics: MetricsReport | None = None
    rounds: list[RoundSummary] = field(default_factory=list)
    artifacts: dict[str, Path] = field(default_factory=dict)
    failed: bool = False
    error: str | None = None


def _window_mean(history, tail: bool, window: int = 50) -> float:
    chunk = history[-window:] if tail else history[:window]
    return float(np.mean(chunk))


def _load_or_synth_seeds(config: TrainConfig) -> NoduleSet:
    if config.seeds_dir:
        seeds = dataset.load_set(config.seeds_dir)
        if seeds.grid_dims != config.dims:
            raise ValueError(f"seeds in {config.seeds_dir} have dims "
                             f"{seeds.grid_dims}, config wants {config.dims}")
        return seeds
    return dataset.synth_seeds(config.seed_count, config.dims, config.spacing,
                               rng_seed=derive_seed(config.rng_seed, 1))


def run(config: TrainConfig, out_dir=None) -> RunReport:
    """Full pipeline: seeds -> base set -> (feedback-)training -> generation
    -> repair -> acceptance -> metrics, with artifacts under out_dir."""
    report = RunReport(config)
    try:
        _run_inner(config, report, Path(out_dir) if out_dir else None)
    except Exception as exc:  # partial report marked failed
        report.failed = True
        report.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return report


def _run_inner(config: TrainConfig, report: RunReport, out_dir: Path | None):
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, out_dir / "config.txt")
        report.artifacts["config"] = out_dir / "config.txt"

    seeds = _load_or_synth_seeds(config)
    seed_features = analyzer.features_of(seeds, config.threshold)
    stats = analyzer.compute_seed_stats(seed_features)
    base = dataset.augment(seeds)

    network = netmod.init_network(config.layer_spec, config.dims, config.spacing,
                                  rng_seed=derive_seed(config.rng_seed, 2),
                                  bottleneck_index=config.bottleneck_index)

    loss_history: list[float] = []
    for k, (iterations, inject) in enumerate(config.feedback_rounds):
        train_set = base
        injected = 0
        if inject and config.feedback_mode == "one_reflection":
            fb = generate(network, config.generation_batch,
                          rng_seed=derive_seed(config.rng_seed, 4, k),
                          threshold=config.threshold)
            fb_accepted, _ = analyzer.analyze_batch(
                fb.nodules, stats, rng_seed=derive_seed(config.rng_seed, 5, k),
                threshold=config.threshold)
            train_set = dataset.inject_feedback(
                base, fb_accepted, rng_seed=derive_seed(config.rng_seed, 6, k))
            injected = len(fb_accepted)
        network, hist = netmod.train(network, train_set, iterations,
                                     batch_size=config.batch_size,
                                     learning_rate=config.learning_rate,
                                     rng_seed=derive_seed(config.rng_seed, 3, k))
        loss_history.extend(hist)
        report.rounds.append(RoundSummary(k, iterations, len(train_set),
                                          injected,
                                          _window_mean(hist, tail=False),
                                          _window_mean(hist, tail=True)))

    generation = generate(network, config.generation_batch,
                          rng_seed=derive_seed(config.rng_seed, 7),
                          threshold=config.threshold)
    rows, kept, _state = analyzer.analyze_records(
        generation.nodules.records, stats,
        rng_seed=derive_seed(config.rng_seed, 8), threshold=config.threshold)
    accepted = NoduleSet(tuple(kept), config.dims, config.spacing)

    seed_matrix = seeds.to_matrix()
    recon = netmod.reconstruct_batch(network, seed_matrix)
    mse = netmod.loss_mse(recon, seed_matrix)

    counts = GenerationCounts(
        generated=generation.count,
        clean=generation.clean_count,
        reconnected=generation.count - generation.clean_count,
        inverted=generation.inverted_count,
        accepted=len(accepted),
    )
    if len(accepted):
        accepted_features = np.array([row.features.as_array() for row in rows
                                      if row.outcome == "accepted"])
        fd = metrics.ft_dist(accepted_features, seed_features, stats)
        fm = metrics.ft_mmse(accepted_features, seed_features, stats)
    else:
        accepted_features = np.zeros((0, analyzer.N_FEATURES))
        fd = float("nan")
        fm = float("nan")
    report.metrics = metrics.build_report(fd, fm, mse, counts)

    if out_dir:
        netmod.save_network(network, out_dir / "weights.bin")
        with open(out_dir / "loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("iteration", "mse"))
            writer.writerows((i + 1, f"{v:.10g}")
                             for i, v in enumerate(loss_history))
        analyzer.save_stats(stats, out_dir / "seed_stats.json")
        analyzer.write_features_csv(rows, out_dir / "features.csv")
        metrics.write_report_csv(report.metrics, out_dir / "metrics.csv")
        dataset.save_set(seeds, out_dir / "seeds")
        if len(accepted):
            dataset.save_set(accepted, out_dir / "accepted")
            report.artifacts["accepted"] = out_dir / "accepted" / dataset.MANIFEST_NAME
        sample = accepted.grids()[:6] if len(accepted) else generation.nodules.grids()[:6]
        if sample:
            plots.save_montage_figure(sample, out_dir / "samples.png")
            voxel.write_pgm_montage(sample[0], out_dir / "sample0.pgm")
            report.artifacts["samples"] = out_dir / "samples.png"
            report.artifacts["sample0_pgm"] = out_dir / "sample0.pgm"
        if len(seeds) >= 2:
            walk = interpolate(network, seeds.records[0].grid,
                               seeds.records[1].grid, steps=6,
                               threshold=config.threshold)
            for i, rec in enumerate(walk):
                voxel.write_pgm_montage(rec.grid,
                                        out_dir / f"interp_step{i}.pgm")
            plots.save_montage_figure(
                walk.grids(), out_dir / "interpolation.png",
                labels=[f"step {i}" for i in range(len(walk))])
            report.artifacts["interpolation"] = out_dir / "interpolation.png"
        points, variances = latent_scatter(network, seeds)
        plots.save_loss_curve(loss_history, out_dir / "loss_curve.png")
        plots.save_latent_scatter(points, out_dir / "latent_scatter.png",
                                  variances=variances)
        if len(accepted):
            plots.save_feature_comparison(stats, accepted_features,
                                          out_dir / "feature_means.png")
            report.artifacts["feature_means"] = out_dir / "feature_means.png"
        for name in ("weights.bin", "loss.csv", "seed_stats.json",
                     "features.csv", "metrics.csv", "loss_curve.png",
                     "latent_scatter.png"):
            report.artifacts[name.split(".")[0]] = out_dir / name
        report.artifacts["seeds"] = out_dir / "seeds" / dataset.MANIFEST_NAME


@dataclass(frozen=True)
class SweepRow:
    label: str
    ac: float
    mse: float
    ft_dist: float
    ft_mmse: float
    score: float
    runs_ok: int
    failures: int


SWEEP_FIELDS = ("label", "ac", "mse", "ft_dist", "ft_mmse", "score",
                "runs_ok", "failures")


def sweep(configs, repeats: int = 2, out_dir=None) -> list[SweepRow]:
    """Run every config `repeats` times with seeds derived from its own
    rng_seed, average the metrics, and rank by mean score (best first).

    Individual run failures are recorded and the sweep continues.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ci, config in enumerate(configs):
        reports, failures = [], 0
        for r in range(repeats):
            run_cfg = replace(config,
                              rng_seed=derive_seed(config.rng_seed, 9, r))
            run_out = out_dir / f"run_{ci:02d}_{r}" if out_dir else None
            rep = run(run_cfg, run_out)
            if rep.failed or rep.metrics is None:
                failures += 1
            else:
                reports.append(rep.metrics)
        if reports:
            def mean_of(attr):
                return float(np.mean([getattr(m, attr) for m in reports]))
            scores = [m.score for m in reports if not m.degenerate]
            mean_score = float(np.mean(scores)) if scores else float("nan")
            rows.append(SweepRow(config.label, mean_of("ac"), mean_of("mse"),
                                 mean_of("ft_dist"), mean_of("ft_mmse"),
                                 mean_score, len(reports), failures))
        else:
            rows.append(SweepRow(config.label, *(float("nan"),) * 5, 0,
                                 failures))
    rows.sort(key=lambda row: (np.isnan(row.score), -row.score
                               if not np.isnan(row.score) else 0.0))
    if out_dir:
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_FIELDS)
            for row in rows:
                writer.writerow([getattr(row, f) for f in SWEEP_FIELDS])
        plots.save_sweep_chart([row.label for row in rows],
                               [row.score for row in rows],
                               out_dir / "sweep_scores.png")
    return rows
