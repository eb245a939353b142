"""3D voxel grids: thresholding, connectivity, repair, reflections, file I/O.

Grids are dense scalar fields in [0,1] laid out [z, y, x] (z outermost).
All operations are pure; grids are immutable once constructed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyNodule

FULL_SCALE_DIMS = (20, 40, 40)
DESK_SCALE_DIMS = (10, 16, 16)
DEFAULT_SPACING = (1.25, 0.7, 0.7)  # mm per voxel, (z, y, x)
DEFAULT_THRESHOLD = 0.5

GRID_MAGIC = b"NDLGRID1"

# Face adjacency only: two voxels are neighbors iff they share a face.
_STRUCTURE_6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class VoxelGrid:
    """Dense scalar field in [0,1] with physical voxel spacing in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != tuple(self.dims):
            raise DimensionMismatch(
                f"values shape {vals.shape} != dims {tuple(self.dims)}")
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("voxel values must lie in [0, 1]")
        vals = np.ascontiguousarray(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "values", vals)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing
        return sz * sy * sx

    def flatten(self) -> np.ndarray:
        """Row-major (z-outermost) copy of the values as a 1D vector."""
        return self.values.reshape(-1).copy()

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, values)

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


@dataclass(frozen=True)
class BinaryMask:
    dims: tuple[int, int, int]
    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def on_count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class ComponentLabeling:
    """Per-voxel component ids; 0 is background, ids are 1..component_count."""

    labels: np.ndarray
    component_count: int
    component_sizes: np.ndarray


def grid_from_values(values: np.ndarray,
                     spacing: tuple[float, float, float] = DEFAULT_SPACING) -> VoxelGrid:
    values = np.asarray(values, dtype=np.float64)
    return VoxelGrid(values.shape, spacing, values)


def binarize(grid: VoxelGrid, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """On iff value >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return BinaryMask(grid.dims, grid.values >= threshold)


def label_components(mask: BinaryMask) -> ComponentLabeling:
    """6-connectivity component labeling.

    Components are numbered 1..k by the smallest linear (raveled) index of
    any member voxel, so the labeling is deterministic regardless of the
    underlying scan order.
    """
    raw, count = ndimage.label(mask.bits, structure=_STRUCTURE_6)
    if count == 0:
        return ComponentLabeling(raw, 0, np.zeros(0, dtype=np.int64))
    flat = raw.reshape(-1)
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(count + 1, dtype=raw.dtype)
    remap[ids[keep][order]] = np.arange(1, count + 1)
    labels = remap[flat].reshape(mask.bits.shape)
    sizes = np.bincount(labels.reshape(-1), minlength=count + 1)[1:]
    return ComponentLabeling(labels, int(count), sizes.astype(np.int64))


def digital_line(start, end) -> list[tuple[int, int, int]]:
    """6-connected digital line between two voxel indices, inclusive.

    Walks one axis step at a time (|dz|+|dy|+|dx| steps total), always taking
    the step that stays closest to the continuous segment. Ties break on the
    fixed axis order z, y, x so the path is deterministic.
    """
    p = np.asarray(start, dtype=np.int64)
    q = np.asarray(end, dtype=np.int64)
    d = (q - p).astype(np.float64)
    norm = np.linalg.norm(d)
    path = [tuple(int(v) for v in p)]
    if norm == 0.0:
        return path
    u = d / norm
    cur = p.copy()
    while not np.array_equal(cur, q):
        best = None
        best_err = np.inf
        for axis in range(3):
            step = int(np.sign(q[axis] - cur[axis]))
            if step == 0:
                continue
            cand = cur.copy()
            cand[axis] += step
            w = (cand - p).astype(np.float64)
            err = np.linalg.norm(w - np.dot(w, u) * u)
            if err < best_err:
                best_err = err
                best = cand
        cur = best
        path.append(tuple(int(v) for v in cur))
    return path


def _nearest_pair(coords_a: np.ndarray, coords_b: np.ndarray):
    """Closest voxel pair between two coordinate lists (Euclidean, index space)."""
    best = (np.inf, None, None)
    # chunk the outer side to bound the distance matrix size
    step = max(1, int(2e6) // max(1, len(coords_b)))
    for lo in range(0, len(coords_a), step):
        chunk = coords_a[lo:lo + step]
        diff = chunk[:, None, :].astype(np.float64) - coords_b[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        i, j = np.unravel_index(np.argmin(d2), d2.shape)
        if d2[i, j] < best[0]:
            best = (float(d2[i, j]), chunk[i], coords_b[j])
    return np.sqrt(best[0]), best[1], best[2]


def reconnect(grid: VoxelGrid, threshold: float = DEFAULT_THRESHOLD) -> VoxelGrid:
    """Force the grid's binarization into a single 6-connected component.

    Components are joined along a minimum spanning tree of their pairwise
    nearest-voxel distances; each tree edge is rasterized as a digital line
    whose previously-off voxels are set to 1.0. Single-component inputs are
    returned unchanged.
    """
    mask = binarize(grid, threshold)
    if mask.on_count == 0:
        raise EmptyNodule("cannot reconnect a grid with no on-voxels")
    labeling = label_components(mask)
    k = labeling.component_count
    if k <= 1:
        return grid

    coords = [np.argwhere(labeling.labels == i + 1) for i in range(k)]
    edges = []
    for i in range(k):
        for j in range(i + 1, k):
            dist, pa, pb = _nearest_pair(coords[i], coords[j])
            edges.append((dist, i, j, pa, pb))
    edges.sort(key=lambda e: (e[0], e[1], e[2]))

    # Kruskal over the component graph
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    values = np.array(grid.values)
    taken = 0
    for dist, i, j, pa, pb in edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        parent[ri] = rj
        for p in digital_line(pa, pb):
            if not mask.bits[p]:
                values[p] = 1.0
        taken += 1
        if taken == k - 1:
            break
    return grid.with_values(values)


def reflect(grid: VoxelGrid, axes: str = "") -> VoxelGrid:
    """Mirror the grid along any subset of the axes 'x', 'y', 'z'."""
    axes = axes.lower()
    bad = set(axes) - set("xyz")
    if bad:
        raise ValueError(f"unknown reflection axes {sorted(bad)}")
    vals = grid.values
    if "z" in axes:
        vals = vals[::-1, :, :]
    if "y" in axes:
        vals = vals[:, ::-1, :]
    if "x" in axes:
        vals = vals[:, :, ::-1]
    return grid.with_values(np.ascontiguousarray(vals))


# The 8 axis-reflection subsets, indexed so bit0=x, bit1=y, bit2=z; index 0
# is the identity.
REFLECTIONS = ("", "x", "y", "xy", "z", "xz", "yz", "xyz")


def shift_half_pixel(grid: VoxelGrid) -> VoxelGrid:
    """Resample at a +0.5 voxel offset in x and y (bilinear, clamp-to-edge).

    Each output voxel is the average of the 2x2 in-plane neighborhood that
    straddles the half-pixel position; z planes are untouched.
    """
    vp = np.pad(grid.values, ((0, 0), (0, 1), (0, 1)), mode="edge")
    out = 0.25 * (vp[:, :-1, :-1] + vp[:, :-1, 1:] + vp[:, 1:, :-1] + vp[:, 1:, 1:])
    return grid.with_values(np.clip(out, 0.0, 1.0))


def save_grid(grid: VoxelGrid, path) -> None:
    """Binary grid file: magic, dims (u32), spacing (f64), values (f32), LE."""
    nz, ny, nx = grid.dims
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<3I", nz, ny, nx))
        fh.write(struct.pack("<3d", *grid.spacing))
        fh.write(grid.values.astype("<f4").tobytes())


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: not a grid file (magic {magic!r})")
        nz, ny, nx = struct.unpack("<3I", fh.read(12))
        spacing = struct.unpack("<3d", fh.read(24))
        raw = fh.read(4 * nz * ny * nx)
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(nz, ny, nx)
    return VoxelGrid((nz, ny, nx), spacing, np.clip(values, 0.0, 1.0))


def _to_bytes(plane: np.ndarray) -> np.ndarray:
    return np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm_slice(grid: VoxelGrid, z: int, path) -> None:
    """Export one z-slice as a binary PGM (P5) image."""
    nz, ny, nx = grid.dims
    if not 0 <= z < nz:
        raise ValueError(f"slice {z} out of range for {nz} planes")
    data = _to_bytes(grid.values[z])
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode())
        fh.write(data.tobytes())


def montage_slices(grid: VoxelGrid) -> np.ndarray:
    """The middle 8 z-slices side by side with 1px white separators."""
    nz, ny, nx = grid.dims
    n = min(8, nz)
    start = (nz - n) // 2
    cols = []
    for i in range(n):
        cols.append(grid.values[start + i])
        if i != n - 1:
            cols.append(np.ones((ny, 1)))
    return np.hstack(cols)


def write_pgm_montage(grid: VoxelGrid, path) -> None:
    """Export the middle-8-slice montage as a binary PGM (P5) image."""
    img = _to_bytes(montage_slices(grid))
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
