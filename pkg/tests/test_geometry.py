import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ffm.geometry import (
    DegenerateGeometryError,
    InteractionPair,
    PointCloud,
    bounding_cubes,
    child_pairs,
    child_ranges,
    classify,
    classify_pairs,
    load_points,
    offset_vectors,
    read_points_binary,
    read_points_csv,
    restrict,
    subdivide,
    write_points_binary,
)


def cloud(pts):
    return PointCloud.from_positions(np.asarray(pts, dtype=float))


def cube_corners(lo, hi):
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


def test_bounding_cubes_takes_max_extent():
    X = cloud(cube_corners([0, 0, 0], [1, 1, 1]))
    Y = cloud(cube_corners([0, 0, 0], [2, 1, 1]))
    gx, gy, d0 = bounding_cubes(X, Y)
    assert d0 == 2.0
    assert gx.edge == gy.edge == 2.0


def test_bounding_cubes_same_cloud():
    X = cloud(cube_corners([0, 0, 0], [1, 1, 1]))
    gx, gy, d0 = bounding_cubes(X, X)
    assert d0 == 1.0
    np.testing.assert_array_equal(gx.origin, gy.origin)


def test_bounding_cubes_distinct_origins():
    X = cloud(cube_corners([0, 0, 0], [1, 1, 1]))
    Y = cloud(cube_corners([5, 5, 5], [6, 6, 6]))
    gx, gy, d0 = bounding_cubes(X, Y)
    assert d0 == 1.0
    np.testing.assert_array_equal(gx.origin, [0, 0, 0])
    np.testing.assert_array_equal(gy.origin, [5, 5, 5])


def test_degenerate_geometry_rejected():
    X = cloud(np.ones((4, 3)))
    with pytest.raises(DegenerateGeometryError):
        bounding_cubes(X, X)


def test_point_cloud_rejects_bad_input():
    with pytest.raises(ValueError):
        PointCloud.from_positions(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud.from_positions(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud.from_positions(np.array([[0.0, np.nan, 0.0]]))


def test_subdivide_single_node():
    X = cloud([[0.3, 0.2, 0.1], [0.3, 0.2, 0.1]])
    Y = cloud([[0, 0, 0], [1, 1, 1]])
    gx, _, _ = bounding_cubes(X, Y)
    child, c = subdivide(gx, X)
    assert len(child) == 1
    assert c.n_active == 2


def test_subdivide_octant_centers():
    pts = 0.25 + 0.5 * cube_corners([0, 0, 0], [1, 1, 1])
    pts = np.vstack([pts, [[0, 0, 0], [1, 1, 1]]])
    X = cloud(pts)
    g, _, _ = bounding_cubes(X, X)
    child, c = subdivide(g, X)
    assert len(child) == 8
    # each octant gets its center plus the two corner points go to opposite octants
    assert sorted(c.counts.tolist()) == [1, 1, 1, 1, 1, 1, 2, 2]


def test_subdivide_uniform_counts(rng):
    pts = rng.random((10_000, 3))
    X = cloud(pts)
    g, _, _ = bounding_cubes(X, X)
    child, c = subdivide(g, X)
    assert len(child) <= 8
    assert c.counts.sum() == 10_000
    # brute-force octant recount
    lo, d = pts.min(0), (pts.max(0) - pts.min(0)).max()
    bits = np.minimum(np.floor((pts - lo) / (d / 2)), 1).astype(int)
    octant = bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2]
    expected = np.bincount(octant, minlength=8)
    got = np.zeros(8, dtype=int)
    oct_child = child.index[:, 0] * 4 + child.index[:, 1] * 2 + child.index[:, 2]
    got[oct_child] = c.counts
    np.testing.assert_array_equal(got, expected)


def check_tree_invariants(grid, c):
    n = len(c)
    assert sorted(c.permutation.tolist()) == list(range(n))
    assert np.all(np.diff(c.box_offsets) >= 0)
    assert c.box_offsets[0] == 0 and c.box_offsets[-1] == n
    assert len({tuple(i) for i in grid.index.tolist()}) == len(grid)
    lo = grid.origin + grid.index * grid.edge
    box = c.box_of_sorted()
    pos = c.positions[c.permutation]
    tol = 1e-12 * grid.edge * 2**grid.level
    assert np.all(pos >= lo[box] - tol)
    assert np.all(pos <= lo[box] + grid.edge + tol)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 60), st.just(3)),
           elements=st.floats(-10, 10, allow_nan=False, width=64)),
    st.integers(1, 5),
)
def test_refinement_invariants(pts, depth):
    if np.ptp(pts, axis=0).max() == 0:
        return
    X = cloud(pts)
    g, _, d0 = bounding_cubes(X, X)
    c = X
    for level in range(1, depth + 1):
        g, c = subdivide(g, c)
        assert g.edge == d0 / 2**level
        np.testing.assert_allclose(g.centers, g.origin + (g.index + 0.5) * g.edge)
        check_tree_invariants(g, c)


def test_restrict_drops_nodes(rng):
    X = cloud(rng.random((500, 3)))
    g, _, _ = bounding_cubes(X, X)
    g, c = subdivide(g, X)
    keep = np.zeros(len(g), dtype=bool)
    keep[::2] = True
    g2, c2, remap = restrict(g, c, keep)
    assert len(g2) == keep.sum()
    assert c2.n_active == c.counts[keep].sum()
    assert np.all(remap[~keep] == -1)
    for old in np.flatnonzero(keep):
        np.testing.assert_array_equal(c2.nodes(remap[old]), c.nodes(old))


def test_child_pairs_enumerates_products():
    t_ranges = np.array([0, 2, 5])
    s_ranges = np.array([0, 3, 4])
    t, s = child_pairs(np.array([0, 1]), np.array([1, 0]), t_ranges, s_ranges)
    expected = [(0, 3), (1, 3)] + [(a, b) for a in range(2, 5) for b in range(0, 3)]
    assert list(zip(t.tolist(), s.tolist())) == expected


def aligned_pair(delta, d=1.0):
    X = cloud(cube_corners([0, 0, 0], [8 * d, 8 * d, 8 * d]))
    g, _, _ = bounding_cubes(X, X)
    from ffm.geometry import LevelGrid

    grid = LevelGrid(3, d, g.origin, np.array([[0, 0, 0], list(delta)], dtype=np.int64))
    return grid


def test_classify_strict_threshold():
    grid = aligned_pair((3, 0, 0))
    far, _ = classify(grid, grid, np.array([1]), np.array([0]))
    assert far[0]
    grid = aligned_pair((2, 0, 0))
    far, _ = classify(grid, grid, np.array([1]), np.array([0]))
    assert not far[0]


def test_classify_pairs_partition():
    grid = aligned_pair((3, 1, 0))
    pairs = [InteractionPair(a, b, (0, 0, 0), "near") for a in range(2) for b in range(2)]
    far, near = classify_pairs(pairs, grid, grid)
    assert len(far) + len(near) == 4
    assert {(p.target_box, p.source_box) for p in far} == {(0, 1), (1, 0)}
    assert all(p.tag == "far" for p in far) and all(p.tag == "near" for p in near)
    assert far[0].offset in {(3, 1, 0), (-3, -1, 0)}


def test_offset_enumeration_bounds():
    # 2D analog: offsets within the 7x7 neighbourhood minus the 3x3 core
    box = [(i, j) for i in range(-3, 4) for j in range(-3, 4)]
    assert len([b for b in box if max(map(abs, b)) > 1]) == 40
    # 3D count in the same style
    cube = list(itertools.product(range(-3, 4), repeat=3))
    assert len([b for b in cube if max(map(abs, b)) > 1]) == 316


def test_far_offsets_reachable_by_descent():
    # with the Euclidean rule, far children of near parents span more than
    # the 7^3 - 3^3 = 316 offsets of the sup-norm picture
    near_parent = [p for p in itertools.product(range(-2, 3), repeat=3) if sum(x * x for x in p) <= 4]
    far = set()
    for p in near_parent:
        for a in itertools.product(range(2), repeat=3):
            for b in itertools.product(range(2), repeat=3):
                d = tuple(2 * p[i] + a[i] - b[i] for i in range(3))
                if sum(x * x for x in d) > 4:
                    far.add(d)
    assert len(far) == 418


def test_offset_key_determines_vector(rng):
    X = cloud(rng.random((400, 3)))
    Y = cloud(rng.random((400, 3)) + np.array([0.3, 0.1, 0.0]))
    gx, gy, _ = bounding_cubes(X, Y)
    cx, cy = X, Y
    for _ in range(3):
        gx, cx = subdivide(gx, cx)
        gy, cy = subdivide(gy, cy)
    t = np.repeat(np.arange(len(gx)), len(gy))
    s = np.tile(np.arange(len(gy)), len(gx))
    far, delta = classify(gx, gy, t, s)
    r0 = offset_vectors(gx, gy, delta)
    direct = gx.centers[t] - gy.centers[s]
    np.testing.assert_allclose(r0, direct, atol=1e-12)
    seen = {}
    for key, vec in zip(map(tuple, delta.tolist()), r0):
        if key in seen:
            assert np.array_equal(seen[key], vec)
        seen[key] = vec


def test_child_ranges(rng):
    X = cloud(rng.random((300, 3)))
    g, _, _ = bounding_cubes(X, X)
    g1, c1 = subdivide(g, X)
    g2, c2 = subdivide(g1, c1)
    r = child_ranges(g2, len(g1))
    for p in range(len(g1)):
        assert np.all(g2.parent[r[p]:r[p + 1]] == p)


def test_binary_roundtrip(tmp_path, rng):
    pts = rng.random((17, 3))
    path = tmp_path / "pts.bin"
    write_points_binary(path, pts)
    assert path.stat().st_size == 17 * 24
    np.testing.assert_array_equal(read_points_binary(path), pts)
    np.testing.assert_array_equal(load_points(path), pts)


def test_binary_rejects_partial_triples(tmp_path):
    path = tmp_path / "bad.bin"
    np.arange(4, dtype="<f8").tofile(path)
    with pytest.raises(ValueError):
        read_points_binary(path)


def test_csv_reader_optional_header(tmp_path):
    a = tmp_path / "a.csv"
    a.write_text("x,y,z\n1,2,3\n4,5,6\n")
    b = tmp_path / "b.csv"
    b.write_text("1,2,3\n4,5,6\n")
    np.testing.assert_array_equal(read_points_csv(a), [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(load_points(b), [[1, 2, 3], [4, 5, 6]])
