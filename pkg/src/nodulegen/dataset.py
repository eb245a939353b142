"""Seed synthesis, 16x reflection/shift augmentation, and training-set assembly."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import voxel
from .voxel import (DEFAULT_SPACING, DESK_SCALE_DIMS, REFLECTIONS, VoxelGrid,
                    binarize, label_components, reflect, shift_half_pixel)

PROVENANCES = ("seed", "reflection", "shifted_reflection", "generated",
               "accepted_feedback")

MANIFEST_NAME = "manifest.txt"

# Static volume criterion; shapes are synthesized with comfortable margin.
MIN_SEED_VOLUME_MM3 = 8.0


@dataclass(frozen=True)
class NoduleRecord:
    grid: VoxelGrid
    provenance: str
    source_id: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class NoduleSet:
    records: tuple[NoduleRecord, ...]
    grid_dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        records = tuple(self.records)
        for rec in records:
            if rec.grid.dims != tuple(self.grid_dims) or rec.grid.spacing != tuple(self.spacing):
                raise ValueError("all member grids must share dims and spacing")
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "grid_dims", tuple(self.grid_dims))
        object.__setattr__(self, "spacing", tuple(self.spacing))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def grids(self) -> list[VoxelGrid]:
        return [rec.grid for rec in self.records]

    def to_matrix(self) -> np.ndarray:
        """(n, voxel_count) matrix of flattened values, row-major z-outermost."""
        return np.stack([rec.grid.values.reshape(-1) for rec in self.records])


def set_from_records(records) -> NoduleSet:
    records = tuple(records)
    if not records:
        raise ValueError("cannot build a NoduleSet from zero records")
    g = records[0].grid
    return NoduleSet(records, g.dims, g.spacing)


def _rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _ellipsoid_field(coords: np.ndarray, center: np.ndarray, semi: np.ndarray,
                     rot: np.ndarray, softness: float) -> np.ndarray:
    w = (coords - center) @ rot.T
    r = np.sqrt(np.sum((w / semi) ** 2, axis=-1))
    return np.clip((1.0 - r) / softness, 0.0, 1.0)


def _synth_one(dims, spacing, rng: np.random.Generator) -> VoxelGrid:
    nz, ny, nx = dims
    dims_f = np.array(dims, dtype=np.float64)
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    coords = np.stack([zz, yy, xx], axis=-1).astype(np.float64)
    margin = 1.0
    softness = 0.35

    while True:
        n_ell = int(rng.integers(1, 5))
        center0 = dims_f / 2.0 + rng.uniform(-0.06, 0.06, size=3) * dims_f
        semi0 = rng.uniform(0.16, 0.26, size=3) * dims_f
        field = np.zeros(dims)
        anchor = center0
        anchor_semi = semi0
        for e in range(n_ell):
            if e == 0:
                center, semi = center0, semi0
            else:
                # keep later lobes centered well inside the first one
                center = anchor + rng.uniform(-0.5, 0.5, size=3) * anchor_semi
                semi = anchor_semi * rng.uniform(0.35, 0.85, size=3)
            rot = _rotation_matrix(rng)
            # half-extent of the rotated ellipsoid along each grid axis
            ext = np.sqrt(((rot.T * semi[:, None]) ** 2).sum(axis=0))
            avail = (dims_f - 1.0) / 2.0 - margin
            scale = min(1.0, float(np.min(avail / ext)) * 0.95)
            semi = semi * scale
            ext = ext * scale
            center = np.clip(center, margin + ext, dims_f - 1.0 - margin - ext)
            field = np.maximum(field, _ellipsoid_field(coords, center, semi, rot, softness))

        grid = VoxelGrid(dims, spacing, field)
        mask = binarize(grid)
        if mask.on_count == 0:
            continue
        if mask.on_count * grid.voxel_volume_mm3 <= MIN_SEED_VOLUME_MM3:
            continue
        if label_components(mask).component_count != 1:
            continue
        return grid


def synth_seeds(count: int,
                dims: tuple[int, int, int] = DESK_SCALE_DIMS,
                spacing: tuple[float, float, float] = DEFAULT_SPACING,
                rng_seed: int = 0) -> NoduleSet:
    """Procedural seed shapes: smoothed unions of 1-4 random ellipsoids.

    Each seed is single-component at threshold 0.5, fits fully inside the
    grid, and clears the static volume criterion. Seed i is drawn from its
    own substream of (rng_seed, i), so sets are reproducible and individual
    seeds do not depend on count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    records = []
    for i in range(count):
        rng = np.random.default_rng([rng_seed, i])
        grid = _synth_one(dims, spacing, rng)
        records.append(NoduleRecord(grid, "seed", f"seed{i:04d}"))
    return NoduleSet(tuple(records), dims, spacing)


def augment(seeds: NoduleSet) -> NoduleSet:
    """16 variants per seed: 8 axis reflections of the original plus the 8
    reflections of its half-pixel-shifted copy.

    Ordering is seed-major, reflection-index-minor, unshifted first. The
    identity variant keeps the 'seed' provenance; everything else is tagged
    'reflection' or 'shifted_reflection'.
    """
    if len(seeds) == 0:
        raise ValueError("augment requires a non-empty seed set")
    records = []
    for rec in seeds:
        for r, axes in enumerate(REFLECTIONS):
            prov = "seed" if r == 0 else "reflection"
            records.append(NoduleRecord(reflect(rec.grid, axes), prov, rec.source_id))
        shifted = shift_half_pixel(rec.grid)
        for axes in REFLECTIONS:
            records.append(NoduleRecord(reflect(shifted, axes),
                                        "shifted_reflection", rec.source_id))
    return NoduleSet(tuple(records), seeds.grid_dims, seeds.spacing)


def inject_feedback(base: NoduleSet, accepted: NoduleSet,
                    rng_seed: int = 0) -> NoduleSet:
    """Base set plus one uniformly-random axis reflection of each accepted
    nodule, tagged 'accepted_feedback'."""
    if len(accepted) == 0:
        return base
    if accepted.grid_dims != base.grid_dims:
        raise ValueError("accepted grids must share dims with the base set")
    rng = np.random.default_rng([rng_seed])
    extra = []
    for rec in accepted:
        axes = REFLECTIONS[int(rng.integers(0, 8))]
        extra.append(NoduleRecord(reflect(rec.grid, axes), "accepted_feedback",
                                  rec.source_id))
    return NoduleSet(base.records + tuple(extra), base.grid_dims, base.spacing)


def save_set(nodules: NoduleSet, out_dir) -> Path:
    """One grid file per record plus a manifest (filename, provenance, source_id)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rec in enumerate(nodules):
        name = f"{i:05d}.vox"
        voxel.save_grid(rec.grid, out_dir / name)
        lines.append(f"{name}\t{rec.provenance}\t{rec.source_id}")
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_set(in_dir) -> NoduleSet:
    in_dir = Path(in_dir)
    manifest = in_dir / MANIFEST_NAME
    records = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, provenance, source_id = line.split("\t")
        records.append(NoduleRecord(voxel.load_grid(in_dir / name), provenance,
                                    source_id))
    return set_from_records(records)
