"""Shape features and the statistical acceptance filter.

Twelve scale-aware descriptors are computed from the binarized voxel mask.
A nodule stream is filtered against the seed statistics: per feature, a
weighted distance d from the seed mean is turned into a keep probability
that only drops below 1 when the nodule would pull the accepted-set running
mean further away from the seed mean and d exceeds 3.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import NoduleRecord, NoduleSet
from .errors import EmptyNodule, MultiComponent
from .voxel import DEFAULT_THRESHOLD, VoxelGrid, binarize, label_components

STATIC_MIN_VOLUME_MM3 = 4.0

FEATURE_NAMES = (
    "volume", "surface_area", "sa_to_vol", "compactness",
    "extent_x", "extent_y", "extent_z", "elongation", "flatness",
    "sphericity", "equivalent_diameter", "fill_fraction",
)

N_FEATURES = len(FEATURE_NAMES)


class FeatureVector(NamedTuple):
    volume: float              # mm^3
    surface_area: float        # mm^2, exposed voxel faces
    sa_to_vol: float           # 1/mm
    compactness: float         # surface_area^3 / volume^2
    extent_x: float            # bounding-box extents, mm
    extent_y: float
    extent_z: float
    elongation: float          # sqrt(l_max / l_min) of principal moments
    flatness: float            # sqrt(l_mid / l_min)
    sphericity: float          # sphere surface / actual surface at same volume
    equivalent_diameter: float # mm
    fill_fraction: float       # volume / bounding-box volume

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


@dataclass(frozen=True)
class SeedStats:
    """Per-feature mean and standard deviation of the seed set."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != (N_FEATURES,) or sigma.shape != (N_FEATURES,):
            raise ValueError("stats must hold one value per feature")
        if np.any(sigma <= 0.0):
            raise ValueError("every feature sigma must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass
class AcceptanceState:
    """Running means over accepted nodules plus the draw stream."""

    running_mean: np.ndarray
    accepted_count: int
    rng: np.random.Generator


def _exposed_surface_area(bits: np.ndarray, spacing) -> float:
    sz, sy, sx = spacing
    face_area = (sy * sx, sz * sx, sz * sy)  # normal along z, y, x
    padded = np.pad(bits, 1, mode="constant")
    total = 0.0
    for axis, area in enumerate(face_area):
        p = np.moveaxis(padded, axis, 0)
        exposed = (p[1:] != p[:-1]).sum()  # every on/off transition is a face
        total += float(exposed) * area
    return total


def extract_features(grid: VoxelGrid,
                     threshold: float = DEFAULT_THRESHOLD) -> FeatureVector:
    """12 descriptors of the binarized shape, in physical (mm) units.

    Raises EmptyNodule / MultiComponent when the mask is not a single
    connected shape.
    """
    mask = binarize(grid, threshold)
    n_on = mask.on_count
    if n_on == 0:
        raise EmptyNodule("no on-voxels at this threshold")
    labeling = label_components(mask)
    if labeling.component_count != 1:
        raise MultiComponent(
            f"expected one component, found {labeling.component_count}")

    sz, sy, sx = grid.spacing
    voxel_vol = sz * sy * sx
    volume = n_on * voxel_vol
    surface = _exposed_surface_area(mask.bits, grid.spacing)

    idx = np.argwhere(mask.bits)  # (n, 3) in (z, y, x)
    mins = idx.min(axis=0)
    maxs = idx.max(axis=0)
    spacing_zyx = np.array([sz, sy, sx])
    extents = (maxs - mins + 1) * spacing_zyx  # (z, y, x) in mm

    # second moments of voxel centers in mm, plus each voxel's own moment
    # (spacing^2/12) so degenerate shapes keep positive definite moments
    pts = idx * spacing_zyx
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / n_on + np.diag(spacing_zyx ** 2 / 12.0)
    eig = np.linalg.eigvalsh(cov)
    elongation = float(np.sqrt(eig[2] / eig[0]))
    flatness = float(np.sqrt(eig[1] / eig[0]))

    sphericity = float(np.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / surface)
    eq_diameter = float((6.0 * volume / np.pi) ** (1.0 / 3.0))
    bbox_volume = float(np.prod(extents))

    return FeatureVector(
        volume=float(volume),
        surface_area=float(surface),
        sa_to_vol=float(surface / volume),
        compactness=float(surface ** 3 / volume ** 2),
        extent_x=float(extents[2]),
        extent_y=float(extents[1]),
        extent_z=float(extents[0]),
        elongation=elongation,
        flatness=flatness,
        sphericity=sphericity,
        equivalent_diameter=eq_diameter,
        fill_fraction=float(volume / bbox_volume),
    )


def static_filter(fv: FeatureVector) -> bool:
    """Static acceptance criterion: volume above 4 mm^3."""
    return fv.volume > STATIC_MIN_VOLUME_MM3


def compute_seed_stats(features: Sequence[FeatureVector] | np.ndarray) -> SeedStats:
    """Population mean/std per feature over the seed set (not the base set).

    Quantized features (e.g. bounding-box extents) can be constant across a
    small seed set; such sigmas are floored at 2% of the feature mean so the
    normalized distances stay finite and sane.
    """
    arr = np.asarray([np.asarray(f, dtype=np.float64) for f in features])
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != N_FEATURES:
        raise ValueError("need at least two 12-feature rows")
    mu = arr.mean(axis=0)
    sigma = arr.std(axis=0)
    if np.all(sigma == 0.0):
        raise ValueError("seed set has no feature variation at all")
    sigma = np.maximum(sigma, np.maximum(0.02 * np.abs(mu), 1e-9))
    return SeedStats(mu, sigma)


def weighted_distance(y_i: float, mean_i: float, mu_i: float,
                      sigma_i: float) -> float:
    """|(y_i + 3*mean_i - 4*mu_i) / sigma_i|: distance of the would-be
    running mean from the seed mean, in seed standard deviations."""
    return abs((y_i + 3.0 * mean_i - 4.0 * mu_i) / sigma_i)


def p_keep(y_i: float, mean_i: float, mu_i: float, d: float) -> float:
    """Keep probability for one feature.

    Drops below 1 only when the value and the running mean sit strictly on
    the same side of the seed mean (the nodule worsens the drift) and d > 3.
    """
    worsens = (y_i > mu_i and mean_i > mu_i) or (y_i < mu_i and mean_i < mu_i)
    if worsens and d > 3.0:
        return min(1.0, 0.7 + 0.9 / d)
    return 1.0


def init_acceptance_state(stats: SeedStats, rng_seed: int = 0) -> AcceptanceState:
    """Running mean starts at the seed mean until something is accepted."""
    return AcceptanceState(stats.mu.copy(), 0,
                           np.random.default_rng([rng_seed, 0xACC]))


def accept(fv: FeatureVector, stats: SeedStats,
           state: AcceptanceState) -> tuple[bool, AcceptanceState]:
    """Draw once per feature whose keep probability is below 1; accept iff
    every feature keeps. No draw happens on P_keep = 1 branches.

    On acceptance the running mean is extended with this nodule's features.
    """
    y = fv.as_array()
    keep = True
    for i in range(N_FEATURES):
        d = weighted_distance(y[i], state.running_mean[i], stats.mu[i],
                              stats.sigma[i])
        p = p_keep(y[i], state.running_mean[i], stats.mu[i], d)
        if p < 1.0 and state.rng.uniform() >= p:
            keep = False
    if keep:
        n = state.accepted_count
        state.running_mean = (state.running_mean * n + y) / (n + 1)
        state.accepted_count = n + 1
    return keep, state


@dataclass(frozen=True)
class AnalysisRow:
    index: int
    provenance: str
    source_id: str
    features: FeatureVector | None
    outcome: str  # accepted | rejected_draw | rejected_static |
    #               rejected_empty | rejected_multicomponent


def analyze_records(records: Sequence[NoduleRecord], stats: SeedStats,
                    rng_seed: int = 0,
                    threshold: float = DEFAULT_THRESHOLD,
                    ) -> tuple[list[AnalysisRow], list[NoduleRecord], AcceptanceState]:
    """Sequential acceptance pass; order matters through the running mean."""
    state = init_acceptance_state(stats, rng_seed)
    rows: list[AnalysisRow] = []
    kept: list[NoduleRecord] = []
    for i, rec in enumerate(records):
        try:
            fv = extract_features(rec.grid, threshold)
        except EmptyNodule:
            rows.append(AnalysisRow(i, rec.provenance, rec.source_id, None,
                                    "rejected_empty"))
            continue
        except MultiComponent:
            rows.append(AnalysisRow(i, rec.provenance, rec.source_id, None,
                                    "rejected_multicomponent"))
            continue
        if not static_filter(fv):
            rows.append(AnalysisRow(i, rec.provenance, rec.source_id, fv,
                                    "rejected_static"))
            continue
        decision, state = accept(fv, stats, state)
        outcome = "accepted" if decision else "rejected_draw"
        rows.append(AnalysisRow(i, rec.provenance, rec.source_id, fv, outcome))
        if decision:
            kept.append(rec)
    return rows, kept, state


def analyze_batch(nodules: NoduleSet, stats: SeedStats, rng_seed: int = 0,
                  threshold: float = DEFAULT_THRESHOLD,
                  ) -> tuple[NoduleSet, AcceptanceState]:
    """Filter a nodule set in order; returns the accepted subset and the
    final acceptance state. Deterministic for a fixed rng_seed."""
    rows, kept, state = analyze_records(nodules.records, stats, rng_seed,
                                        threshold)
    accepted = NoduleSet(tuple(kept), nodules.grid_dims, nodules.spacing)
    return accepted, state


def features_of(nodules: NoduleSet | Sequence[NoduleRecord],
                threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """(n, 12) feature matrix; raises if any member is empty/multi-component."""
    records = nodules.records if isinstance(nodules, NoduleSet) else nodules
    return np.array([extract_features(rec.grid, threshold).as_array()
                     for rec in records])


def write_features_csv(rows: Sequence[AnalysisRow], path) -> None:
    """One row per analyzed nodule: features, provenance, outcome."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("index",) + FEATURE_NAMES + ("provenance", "source_id",
                                                      "outcome"))
        for row in rows:
            feats = (["%.10g" % v for v in row.features] if row.features is not None
                     else [""] * N_FEATURES)
            writer.writerow([row.index] + feats + [row.provenance,
                                                   row.source_id, row.outcome])


def save_stats(stats: SeedStats, path) -> None:
    payload = {
        "features": [
            {"name": name, "mu": float(m), "sigma": float(s)}
            for name, m, s in zip(FEATURE_NAMES, stats.mu, stats.sigma)
        ]
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_stats(path) -> SeedStats:
    payload = json.loads(Path(path).read_text())
    by_name = {f["name"]: f for f in payload["features"]}
    mu = np.array([by_name[n]["mu"] for n in FEATURE_NAMES])
    sigma = np.array([by_name[n]["sigma"] for n in FEATURE_NAMES])
    return SeedStats(mu, sigma)
