import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datmo.bev_grid import (
    BevGrid,
    GridSpec,
    cell_indices,
    cell_of_point,
    crop_points,
    rasterize,
    read_pgm,
    read_points,
    read_velodyne_bin,
    remove_ground,
    write_pgm,
    write_velodyne_bin,
)
from datmo.errors import ConfigError, DataError

SMALL = GridSpec(n=20, m=20, w=0.5, h=0.5, origin=(0.25, 0.25), z_ground=0.0, z_cap=100.0)


def center(spec, i, j):
    return spec.origin[0] + i * spec.w, spec.origin[1] + j * spec.h


def test_point_at_cell_center():
    x, y = center(SMALL, 5, 5)
    assert cell_of_point((x, y, 0.0), SMALL) == (5, 5)


def test_upper_edge_belongs_to_next_cell():
    x, y = center(SMALL, 5, 5)
    assert cell_of_point((x + SMALL.w / 2, y, 0.0), SMALL) == (6, 5)
    assert cell_of_point((x, y + SMALL.h / 2, 0.0), SMALL) == (5, 6)
    # lower edge is inclusive
    assert cell_of_point((x - SMALL.w / 2, y, 0.0), SMALL) == (5, 5)


def test_point_outside_extent():
    assert cell_of_point((SMALL.origin[0] - SMALL.w, SMALL.origin[1], 0.0), SMALL) is None
    assert cell_of_point((100.0, 1.0, 0.0), SMALL) is None


def test_default_grid_covers_120m_radius():
    spec = GridSpec()
    assert spec.shape == (1412, 1412)
    assert cell_of_point((-119.99, -119.99, 0.0), spec) == (0, 0)
    assert cell_of_point((119.99, 119.99, 0.0), spec) == (1411, 1411)


def test_single_point_value():
    spec = GridSpec(n=4, m=4, w=1.0, h=1.0, origin=(0.5, 0.5), h_max=2.0, z_ground=0.0)
    g = rasterize(np.array([[1.5, 1.5, 2.0]]), spec)
    assert g.values[1, 1] == 255.0
    assert np.count_nonzero(g.values) == 1


def test_two_point_mean():
    spec = GridSpec(n=4, m=4, w=1.0, h=1.0, origin=(0.5, 0.5), a=1.0, b=0.0, h_max=4.0, z_ground=0.0)
    g = rasterize(np.array([[0.2, 0.2, 1.0], [0.7, 0.9, 3.0]]), spec)
    assert g.values[0, 0] == pytest.approx(127.5)
    # quantization rounds half up at the flow boundary
    assert g.quantized()[0, 0] == 128


def test_two_point_std():
    # heights {1, 3}: population std 1
    spec = GridSpec(n=2, m=2, w=1.0, h=1.0, origin=(0.5, 0.5), a=0.0, b=1.0, h_max=4.0, z_ground=0.0)
    g = rasterize(np.array([[0.2, 0.2, 1.0], [0.7, 0.9, 3.0]]), spec)
    assert g.values[0, 0] == pytest.approx(255.0 / 4.0)


def test_heights_are_measured_from_ground():
    spec = GridSpec(n=2, m=2, w=1.0, h=1.0, origin=(0.5, 0.5), h_max=3.0, z_ground=-1.73)
    g = rasterize(np.array([[0.5, 0.5, -1.73 + 1.5]]), spec)
    assert g.values[0, 0] == pytest.approx(127.5)


def test_values_clamped():
    spec = GridSpec(n=2, m=2, w=1.0, h=1.0, origin=(0.5, 0.5), h_max=1.0, z_ground=0.0)
    g = rasterize(np.array([[0.5, 0.5, 3.0], [1.5, 0.5, -2.0]]), spec)
    assert g.values[0, 0] == 255.0
    assert g.values[1, 0] == 0.0


def test_points_above_cap_dropped():
    spec = GridSpec(n=2, m=2, w=1.0, h=1.0, origin=(0.5, 0.5), z_ground=0.0, z_cap=4.0)
    g = rasterize(np.array([[0.5, 0.5, 6.0]]), spec)
    assert not g.values.any()


def test_empty_cloud():
    g = rasterize(np.zeros((0, 3)), SMALL)
    assert g.values.shape == SMALL.shape
    assert not g.values.any()


def test_invalid_spec_rejected():
    with pytest.raises(ConfigError):
        rasterize(np.zeros((1, 3)), GridSpec(n=2, m=2, w=0.0))
    with pytest.raises(ConfigError):
        rasterize(np.zeros((1, 3)), GridSpec(n=2, m=2, h_max=-1.0))


def test_remove_ground_all_below():
    spec = GridSpec(n=3, m=3, ground_threshold=25)
    g = BevGrid(np.full((3, 3), 20.0), spec)
    assert not remove_ground(g).values.any()


def test_remove_ground_zero_threshold_is_identity():
    rng = np.random.default_rng(1)
    spec = GridSpec(n=8, m=8, ground_threshold=0)
    v = rng.uniform(0, 255, (8, 8))
    v[rng.random((8, 8)) < 0.3] = 0
    g = BevGrid(v, spec)
    np.testing.assert_array_equal(remove_ground(g).values, v)


def test_remove_ground_scan_oracle():
    rng = np.random.default_rng(2)
    spec = GridSpec(n=16, m=12, ground_threshold=40)
    v = rng.integers(0, 256, (16, 12)).astype(float)
    out = remove_ground(BevGrid(v, spec)).values
    for i in range(16):
        for j in range(12):
            expected = 0.0 if 0 < v[i, j] <= 40 else v[i, j]
            assert out[i, j] == expected


def _cloud(rng, n):
    xy = rng.uniform(0, 10, (n, 2))
    z = rng.uniform(-0.5, 3.5, (n, 1))
    return np.hstack([xy, z])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rasterize_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = _cloud(rng, 60)
    a = rasterize(pts, SMALL).values
    b = rasterize(pts[rng.permutation(len(pts))], SMALL).values
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adding_points_keeps_cells_occupied(seed):
    rng = np.random.default_rng(seed)
    pts = _cloud(rng, 40)
    pts[:, 2] = np.abs(pts[:, 2]) + 0.1
    extra = _cloud(rng, 10)
    extra[:, 2] = np.abs(extra[:, 2]) + 0.1
    before = rasterize(pts, SMALL).occupancy
    after = rasterize(np.vstack([pts, extra]), SMALL).occupancy
    assert not (before & ~after).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_remove_ground_idempotent(seed):
    rng = np.random.default_rng(seed)
    g = remove_ground(rasterize(_cloud(rng, 80), SMALL))
    np.testing.assert_array_equal(remove_ground(g).values, g.values)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 11), st.floats(-1, 11)), min_size=1, max_size=50))
def test_every_point_in_exactly_one_cell(xy):
    xy = np.array(xy)
    i, j = cell_indices(xy, SMALL)
    lo_x = SMALL.origin[0] - SMALL.w / 2
    lo_y = SMALL.origin[1] - SMALL.h / 2
    for k, (x, y) in enumerate(xy):
        hits = [
            (a, b)
            for a in range(SMALL.n)
            for b in range(SMALL.m)
            if lo_x + a * SMALL.w <= x < lo_x + (a + 1) * SMALL.w
            and lo_y + b * SMALL.h <= y < lo_y + (b + 1) * SMALL.h
        ]
        assert len(hits) <= 1
        if hits:
            assert (i[k], j[k]) == hits[0]
        else:
            assert i[k] == -1 and j[k] == -1


def test_from_extent():
    spec = GridSpec.from_extent(-15, 80, -25, 25, 0.17)
    assert spec.origin == pytest.approx((-15 + 0.085, -25 + 0.085))
    assert spec.n == 559 and spec.m == 295
    assert cell_of_point((-15.0, -25.0, 0.0), spec) == (0, 0)


def test_crop_half_open():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.5, 0.5, 0.0]])
    out = crop_points(pts, (0.0, 1.0, 0.0, 1.0))
    np.testing.assert_array_equal(out, pts[[0, 3]])


def test_velodyne_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(100, 4)).astype("<f4")
    write_velodyne_bin(tmp_path / "a.bin", pts)
    back = read_velodyne_bin(tmp_path / "a.bin")
    assert back.dtype == np.dtype("<f4")
    np.testing.assert_array_equal(back, pts)


def test_velodyne_truncated(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\0" * 40)
    with pytest.raises(DataError, match="byte offset 32"):
        read_velodyne_bin(tmp_path / "bad.bin")


def test_csv_points(tmp_path):
    (tmp_path / "p.csv").write_text("x,y,z\n1,2,3\n4,5,6\n")
    np.testing.assert_array_equal(read_points(tmp_path / "p.csv"), [[1, 2, 3], [4, 5, 6]])


def test_pgm_roundtrip(tmp_path):
    spec = GridSpec(n=3, m=5)
    v = np.arange(15, dtype=float).reshape(3, 5) * 17.2
    write_pgm(tmp_path / "g.pgm", BevGrid(v, spec))
    img = read_pgm(tmp_path / "g.pgm")
    assert img.shape == (3, 5)
    np.testing.assert_array_equal(img, np.floor(v + 0.5))
