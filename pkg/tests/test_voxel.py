import numpy as np
import pytest

from nodulegen.errors import EmptyNodule
from nodulegen.voxel import (REFLECTIONS, VoxelGrid, binarize, digital_line,
                             label_components, load_grid,
                             montage_slices, reconnect, reflect, save_grid,
                             shift_half_pixel, write_pgm_montage,
                             write_pgm_slice)

from conftest import random_grid


def make_grid(vals, spacing=(1.25, 0.7, 0.7)):
    vals = np.asarray(vals, dtype=float)
    return VoxelGrid(vals.shape, spacing, vals)


# ---------------------------------------------------------------- binarize

def test_binarize_all_zero():
    g = make_grid(np.zeros((3, 4, 5)))
    assert binarize(g, 0.5).on_count == 0


def test_binarize_all_one():
    g = make_grid(np.ones((3, 4, 5)))
    assert binarize(g, 0.5).on_count == 3 * 4 * 5


def test_binarize_single_voxel_above_threshold():
    vals = np.zeros((3, 3, 3))
    vals[1, 2, 0] = 0.6
    mask = binarize(make_grid(vals), 0.5)
    assert mask.on_count == 1
    assert mask.bits[1, 2, 0]


def test_binarize_threshold_is_inclusive():
    vals = np.zeros((1, 1, 2))
    vals[0, 0, 0] = 0.5
    assert binarize(make_grid(vals), 0.5).on_count == 1


def test_binarize_rejects_degenerate_threshold():
    g = make_grid(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        binarize(g, 0.0)
    with pytest.raises(ValueError):
        binarize(g, 1.0)


def test_grid_validates_range_and_shape():
    with pytest.raises(ValueError):
        make_grid(np.full((2, 2, 2), 1.5))
    with pytest.raises(Exception):
        VoxelGrid((2, 2, 2), (1, 1, 1), np.zeros((2, 2, 3)))


# ------------------------------------------------------- label_components

def test_label_empty_mask():
    lab = label_components(binarize(make_grid(np.zeros((3, 3, 3)))))
    assert lab.component_count == 0
    assert lab.component_sizes.size == 0


def test_label_face_adjacent_pair_is_one_component():
    vals = np.zeros((3, 3, 3))
    vals[1, 1, 1] = 1.0
    vals[1, 1, 2] = 1.0
    lab = label_components(binarize(make_grid(vals)))
    assert lab.component_count == 1
    assert lab.component_sizes.tolist() == [2]


def test_label_corner_touching_pair_is_two_components():
    # corner adjacency is not 6-connectivity
    vals = np.zeros((3, 3, 3))
    vals[0, 0, 0] = 1.0
    vals[1, 1, 1] = 1.0
    lab = label_components(binarize(make_grid(vals)))
    assert lab.component_count == 2
    assert lab.component_sizes.tolist() == [1, 1]


def test_label_edge_touching_pair_is_two_components():
    vals = np.zeros((2, 2, 2))
    vals[0, 0, 0] = 1.0
    vals[0, 1, 1] = 1.0
    assert label_components(binarize(make_grid(vals))).component_count == 2


def _brute_force_labeling(bits):
    """Union-find over all face-adjacent on-voxel pairs."""
    coords = [tuple(p) for p in np.argwhere(bits)]
    index = {p: i for i, p in enumerate(coords)}
    parent = list(range(len(coords)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for p, i in index.items():
        for axis in range(3):
            for step in (-1, 1):
                q = list(p)
                q[axis] += step
                j = index.get(tuple(q))
                if j is not None:
                    parent[find(i)] = find(j)
    groups = {}
    for p, i in index.items():
        groups.setdefault(find(i), set()).add(p)
    return list(groups.values())


def test_label_matches_brute_force_union_find():
    rng = np.random.default_rng(99)
    for trial in range(30):
        dims = tuple(int(rng.integers(2, 9)) for _ in range(3))
        g = random_grid(rng, dims=dims, density=float(rng.uniform(0.05, 0.5)))
        lab = label_components(binarize(g))
        expected = _brute_force_labeling(g.values >= 0.5)
        assert lab.component_count == len(expected)
        got = {}
        for p in np.argwhere(g.values >= 0.5):
            got.setdefault(int(lab.labels[tuple(p)]), set()).add(tuple(p))
        assert sorted(map(sorted, got.values())) == sorted(map(sorted, expected))
        assert int(lab.component_sizes.sum()) == int((g.values >= 0.5).sum())


def test_label_ids_ordered_by_smallest_linear_index():
    rng = np.random.default_rng(7)
    for trial in range(20):
        g = random_grid(rng, dims=(5, 5, 5), density=0.25)
        lab = label_components(binarize(g))
        firsts = []
        flat = lab.labels.reshape(-1)
        for cid in range(1, lab.component_count + 1):
            firsts.append(int(np.flatnonzero(flat == cid)[0]))
        assert firsts == sorted(firsts)


# ------------------------------------------------------------ digital line

def test_digital_line_is_six_connected_and_short():
    rng = np.random.default_rng(3)
    for trial in range(50):
        p = tuple(int(v) for v in rng.integers(0, 10, 3))
        q = tuple(int(v) for v in rng.integers(0, 10, 3))
        path = digital_line(p, q)
        assert path[0] == p and path[-1] == q
        l1 = sum(abs(a - b) for a, b in zip(p, q))
        assert len(path) == l1 + 1
        for a, b in zip(path, path[1:]):
            assert sum(abs(x - y) for x, y in zip(a, b)) == 1


# --------------------------------------------------------------- reconnect

def test_reconnect_identity_for_single_component():
    vals = np.zeros((3, 3, 3))
    vals[1, 1, 1] = 0.8
    vals[1, 1, 2] = 0.9
    g = make_grid(vals)
    out = reconnect(g, 0.5)
    assert np.array_equal(out.values, g.values)


def test_reconnect_raises_on_empty():
    with pytest.raises(EmptyNodule):
        reconnect(make_grid(np.zeros((3, 3, 3))), 0.5)


def test_reconnect_opposite_corners():
    vals = np.zeros((3, 3, 3))
    vals[0, 0, 0] = 1.0
    vals[2, 2, 2] = 1.0
    out = reconnect(make_grid(vals), 0.5)
    lab = label_components(binarize(out, 0.5))
    assert lab.component_count == 1
    path = digital_line((0, 0, 0), (2, 2, 2))
    added = binarize(out).on_count - 2
    assert added == len(path) - 2  # interior voxels of the connecting line


def test_reconnect_three_blobs_bounded_by_two_shortest_bridges():
    vals = np.zeros((9, 9, 9))
    blobs = [(1, 1, 1), (1, 7, 1), (7, 7, 7)]
    for c in blobs:
        vals[c] = 1.0
    g = make_grid(vals)
    out = reconnect(g, 0.5)
    assert label_components(binarize(out)).component_count == 1
    # exhaustive pairwise nearest-voxel search over the original blobs
    bridges = []
    for i in range(3):
        for j in range(i + 1, 3):
            path = digital_line(blobs[i], blobs[j])
            bridges.append(len(path) - 2)
    bridges.sort()
    added = binarize(out).on_count - 3
    assert added <= bridges[0] + bridges[1]


def test_reconnect_idempotent_and_monotone_on_random_masks():
    rng = np.random.default_rng(11)
    for trial in range(100):
        g = random_grid(rng, dims=(6, 6, 6), density=float(rng.uniform(0.03, 0.3)))
        if binarize(g).on_count == 0:
            continue
        once = reconnect(g, 0.5)
        assert label_components(binarize(once)).component_count == 1
        assert np.all(once.values >= g.values)  # never clears a voxel
        twice = reconnect(once, 0.5)
        assert np.array_equal(twice.values, once.values)


def test_reconnect_only_sets_previously_off_voxels_to_one():
    rng = np.random.default_rng(13)
    g = random_grid(rng, dims=(6, 6, 6), density=0.08)
    if binarize(g).on_count == 0:
        pytest.skip("empty draw")
    out = reconnect(g, 0.5)
    changed = out.values != g.values
    assert np.all(out.values[changed] == 1.0)
    assert np.all(g.values[changed] < 0.5)


# ----------------------------------------------------------------- reflect

def test_reflect_empty_axes_is_identity():
    rng = np.random.default_rng(1)
    g = make_grid(rng.uniform(0, 1, (4, 5, 6)))
    assert np.array_equal(reflect(g, "").values, g.values)


def test_reflect_is_involution():
    rng = np.random.default_rng(2)
    g = make_grid(rng.uniform(0, 1, (4, 5, 6)))
    for axes in REFLECTIONS:
        assert np.array_equal(reflect(reflect(g, axes), axes).values, g.values)


def test_reflect_x_hand_enumerated():
    vals = np.arange(8, dtype=float).reshape(2, 2, 2) / 8.0
    out = reflect(make_grid(vals), "x")
    for z in range(2):
        for y in range(2):
            for x in range(2):
                assert out.values[z, y, x] == vals[z, y, 1 - x]


def test_reflect_preserves_counts_and_components():
    rng = np.random.default_rng(4)
    for trial in range(10):
        g = random_grid(rng, dims=(5, 6, 7), density=0.25)
        base = label_components(binarize(g))
        for axes in REFLECTIONS:
            r = reflect(g, axes)
            assert binarize(r).on_count == binarize(g).on_count
            assert label_components(binarize(r)).component_count == base.component_count


def test_reflect_rejects_unknown_axes():
    g = make_grid(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        reflect(g, "w")


# -------------------------------------------------------- shift_half_pixel

def test_shift_constant_grid_unchanged():
    g = make_grid(np.full((3, 4, 4), 0.37))
    out = shift_half_pixel(g)
    assert np.allclose(out.values, 0.37, atol=1e-15)


def test_shift_single_voxel_spreads_quarter():
    vals = np.zeros((3, 5, 5))
    vals[1, 2, 2] = 1.0
    out = shift_half_pixel(make_grid(vals))
    expected = np.zeros((3, 5, 5))
    for dy in (1, 2):
        for dx in (1, 2):
            expected[1, dy, dx] = 0.25
    assert np.allclose(out.values, expected, atol=1e-15)


def test_shift_stays_in_range():
    rng = np.random.default_rng(5)
    g = make_grid(rng.uniform(0, 1, (4, 6, 6)))
    out = shift_half_pixel(g)
    assert out.values.min() >= 0.0 and out.values.max() <= 1.0


def test_shift_preserves_interior_mass():
    vals = np.zeros((4, 8, 8))
    vals[1:3, 2:6, 2:6] = np.random.default_rng(6).uniform(0.2, 1.0, (2, 4, 4))
    g = make_grid(vals)
    out = shift_half_pixel(g)
    assert abs(out.values.sum() - vals.sum()) <= 0.01 * vals.sum()


# --------------------------------------------------------------- file I/O

def test_grid_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    g = make_grid(rng.uniform(0, 1, (4, 5, 6)), spacing=(1.25, 0.7, 0.7))
    path = tmp_path / "g.vox"
    save_grid(g, path)
    back = load_grid(path)
    assert back.dims == g.dims
    assert back.spacing == g.spacing
    # values survive the float32 storage exactly
    assert np.array_equal(back.values,
                          g.values.astype("<f4").astype(np.float64))
    save_grid(back, tmp_path / "g2.vox")
    assert (tmp_path / "g.vox").read_bytes() == (tmp_path / "g2.vox").read_bytes()


def test_load_grid_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.vox"
    path.write_bytes(b"NOTAGRID" + b"\0" * 64)
    with pytest.raises(ValueError):
        load_grid(path)


def test_pgm_slice_export(tmp_path):
    vals = np.zeros((3, 4, 5))
    vals[1, 2, 3] = 1.0
    g = make_grid(vals)
    path = tmp_path / "s.pgm"
    write_pgm_slice(g, 1, path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n5 4\n255\n")
    pixels = data.split(b"255\n", 1)[1]
    assert len(pixels) == 4 * 5
    assert pixels[2 * 5 + 3] == 255
    with pytest.raises(ValueError):
        write_pgm_slice(g, 5, tmp_path / "x.pgm")


def test_pgm_montage_shape(tmp_path):
    g = make_grid(np.zeros((20, 7, 9)))
    img = montage_slices(g)
    assert img.shape == (7, 8 * 9 + 7)
    path = tmp_path / "m.pgm"
    write_pgm_montage(g, path)
    header = path.read_bytes().split(b"\n")
    assert header[0] == b"P5"
    assert header[1] == b"79 7"


def test_montage_uses_middle_slices():
    vals = np.zeros((20, 3, 3))
    vals[6] = 1.0   # first slice of the middle 8
    vals[0] = 0.5   # outside the montage window
    img = montage_slices(make_grid(vals))
    assert img[:, :3].min() == 1.0
    assert not np.any(img == 0.5)
