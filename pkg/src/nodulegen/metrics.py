"""Evaluation metrics and the composite score for ranking configurations.

FtDist rewards novelty (mean normalized distance from each accepted nodule
to its closest seed), FtMMSE penalizes distribution drift (squared gap of
per-feature means), AC is the analyzer acceptance fraction, and MSE is the
autoencoder's seed-reconstruction error. Score combines all four; higher is
better.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .analyzer import SeedStats
from .errors import DegenerateAcceptance, EmptySet


def ft_dist(accepted: np.ndarray, seeds: np.ndarray, stats: SeedStats) -> float:
    """Mean over accepted nodules of the sigma-normalized Euclidean distance
    to the nearest seed in 12-feature space."""
    accepted = np.atleast_2d(np.asarray(accepted, dtype=np.float64))
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    if accepted.size == 0 or seeds.size == 0:
        raise EmptySet("ft_dist needs non-empty accepted and seed sets")
    diff = (accepted[:, None, :] - seeds[None, :, :]) / stats.sigma
    dists = np.sqrt((diff ** 2).sum(axis=2))
    return float(dists.min(axis=1).mean())


def ft_mmse(accepted: np.ndarray, seeds: np.ndarray, stats: SeedStats) -> float:
    """Mean over features of the squared sigma-normalized gap between the
    accepted-set mean and the seed-set mean."""
    accepted = np.atleast_2d(np.asarray(accepted, dtype=np.float64))
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    if accepted.size == 0 or seeds.size == 0:
        raise EmptySet("ft_mmse needs non-empty accepted and seed sets")
    gap = (accepted.mean(axis=0) - seeds.mean(axis=0)) / stats.sigma
    return float(np.mean(gap ** 2))


def score(ft_dist_value: float, ft_mmse_value: float, mse: float,
          ac: float) -> float:
    """(FtDist - 1) / ((FtMMSE + 0.1) * (MSE + 0.1) * (1 - AC))."""
    if not 0.0 <= ac <= 1.0:
        raise ValueError(f"acceptance fraction {ac} outside [0, 1]")
    if ac == 1.0:
        raise DegenerateAcceptance("AC = 1 makes the score unbounded")
    return (ft_dist_value - 1.0) / (
        (ft_mmse_value + 0.1) * (mse + 0.1) * (1.0 - ac))


@dataclass(frozen=True)
class GenerationCounts:
    generated: int
    clean: int        # single component before any repair
    reconnected: int  # generated - clean
    inverted: int     # majority-on decodes (polarity flip pathology)
    accepted: int


@dataclass(frozen=True)
class MetricsReport:
    ac: float
    mse: float        # raw per-voxel seed-reconstruction MSE
    ft_dist: float
    ft_mmse: float
    score: float      # NaN when degenerate
    degenerate: bool  # AC = 1 sentinel: score is unbounded, not comparable
    counts: GenerationCounts


def build_report(ft_dist_value: float, ft_mmse_value: float, mse: float,
                 counts: GenerationCounts) -> MetricsReport:
    ac = counts.accepted / counts.generated if counts.generated else 0.0
    if ac == 1.0:
        return MetricsReport(ac, mse, ft_dist_value, ft_mmse_value,
                             float("nan"), True, counts)
    return MetricsReport(ac, mse, ft_dist_value, ft_mmse_value,
                         score(ft_dist_value, ft_mmse_value, mse, ac),
                         False, counts)


REPORT_FIELDS = ("ac", "mse", "ft_dist", "ft_mmse", "score", "degenerate",
                 "generated", "clean", "reconnected", "inverted", "accepted")


def report_row(report: MetricsReport) -> list:
    c = report.counts
    return [report.ac, report.mse, report.ft_dist, report.ft_mmse,
            report.score, int(report.degenerate), c.generated, c.clean,
            c.reconnected, c.inverted, c.accepted]


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        writer.writerow(report_row(report))


def read_report_csv(path) -> MetricsReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty metrics file")
    r = rows[0]
    counts = GenerationCounts(int(r["generated"]), int(r["clean"]),
                              int(r["reconnected"]), int(r["inverted"]),
                              int(r["accepted"]))
    return MetricsReport(float(r["ac"]), float(r["mse"]), float(r["ft_dist"]),
                         float(r["ft_mmse"]), float(r["score"]),
                         bool(int(r["degenerate"])), counts)


def format_table_row(report: MetricsReport, label: str = "") -> str:
    """One human-readable line; MSE is shown x1000 as in the sweep tables."""
    score_txt = "unbounded" if report.degenerate else f"{report.score:.2f}"
    head = f"{label:<24s} " if label else ""
    return (f"{head}AC% {100.0 * report.ac:5.1f} | MSE(x1000) "
            f"{1000.0 * report.mse:7.3f} | FtDist {report.ft_dist:6.3f} | "
            f"FtMMSE {report.ft_mmse:6.3f} | Clean {report.counts.clean} | "
            f"Invert {report.counts.inverted} | Score {score_txt}")
