import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segproto.errors import EmptyInputError, ParseError
from segproto.pointcloud import (default_room_recipe, estimate_normals, generate_synthetic_scene, knn_graph,
                                 load_ply, make_cloud, parse_recipe, read_ply, write_ply)

FIXTURES = Path(__file__).parent / "fixtures"


# ---- PLY -------------------------------------------------------------------

def test_ply_without_color_gets_gray():
    cloud = load_ply(FIXTURES / "tri_nocolor.ply")
    assert len(cloud) == 3
    np.testing.assert_array_equal(cloud.colors, np.full((3, 3), 0.5))
    np.testing.assert_array_equal(cloud.ids, [0, 1, 2])


def test_ply_uchar_color_scaled():
    cloud = load_ply(FIXTURES / "red_point.ply")
    np.testing.assert_array_equal(cloud.coords[0], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(cloud.colors[0], [1.0, 0.0, 0.0])


def test_reference_fixture_matches_independent_reader():
    # frozen from a third-party PLY reader run once on this file
    cloud = load_ply(FIXTURES / "ref_1000.ply")
    assert len(cloud) == 1000
    np.testing.assert_array_equal(cloud.coords.min(axis=0),
                                  [-1.9978806972503662, -1.9907423257827759, -1.993079662322998])
    np.testing.assert_array_equal(cloud.coords.max(axis=0),
                                  [2.992696762084961, 2.999124765396118, 2.9952235221862793])
    rgb = np.rint(cloud.colors * 255).astype(np.int64)
    assert rgb.sum() == 380206
    assert (rgb * np.arange(1, 1001)[:, None]).sum() == 191498147
    assert cloud.colors.sum() == pytest.approx(1491.0039215686274, abs=1e-9)
    assert cloud.labels.sum() == 2064
    np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-6)


def test_ply_roundtrip_binary_and_ascii(tmp_path):
    cloud = generate_synthetic_scene(3, default_room_recipe())
    for binary in (True, False):
        path = tmp_path / f"c_{binary}.ply"
        write_ply(path, cloud, extra={"score": np.arange(len(cloud)) * 0.5}, binary=binary)
        back = load_ply(path)
        np.testing.assert_array_equal(back.coords, cloud.coords)
        np.testing.assert_array_equal(back.labels, cloud.labels)
        np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-12)
        assert np.abs(back.colors - cloud.colors).max() <= 0.5 / 255 + 1e-12
        np.testing.assert_array_equal(read_ply(path)["score"], np.arange(len(cloud)) * 0.5)


def test_ply_errors(tmp_path):
    empty = tmp_path / "empty.ply"
    empty.write_text("ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\n"
                     "property float z\nend_header\n")
    with pytest.raises(EmptyInputError):
        load_ply(empty)
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                   "property float z\nend_header\n1 2 3\n4 5\n")
    with pytest.raises(ParseError, match="vertex 1"):
        load_ply(bad)
    notply = tmp_path / "x.ply"
    notply.write_text("hello\n")
    with pytest.raises(ParseError):
        load_ply(notply)


# ---- synthetic scenes --------------------------------------------------------

def test_single_floor_recipe():
    recipe = parse_recipe("floor class=0 size=2,2 center=0,0,0 density=100\nset coord_noise=0.001")
    cloud = generate_synthetic_scene(0, recipe)
    assert len(cloud) == 400
    assert set(cloud.labels.tolist()) == {0}
    np.testing.assert_array_equal(cloud.normals, np.tile([0.0, 0.0, 1.0], (400, 1)))
    assert np.abs(cloud.coords[:, 2]).max() < 0.01


def test_scene_generation_is_deterministic():
    a = generate_synthetic_scene(17, default_room_recipe())
    b = generate_synthetic_scene(17, default_room_recipe())
    for name in ("coords", "colors", "normals", "labels", "ids"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_default_room_counts_follow_area():
    # areas by hand: floor 3x3, wall 3x1.6, box top + four sides, sphere 4 pi r^2
    expected = {0: 9.0 * 40, 1: 4.8 * 40, 2: (0.9 * 0.6 + 2 * 0.6 * 0.5 + 2 * 0.9 * 0.5) * 110,
                3: 4 * math.pi * 0.25 ** 2 * 180}
    cloud = generate_synthetic_scene(5, default_room_recipe())
    counts = np.bincount(cloud.labels)
    for cls, exp in expected.items():
        assert abs(counts[cls] - exp) <= 0.05 * exp


def test_recipe_errors():
    with pytest.raises(ParseError, match="line 2"):
        parse_recipe("floor class=0 size=1,1\ncone class=1")
    with pytest.raises(ParseError):
        parse_recipe("floor class=0 size=1,1 colour=1,1,1")
    with pytest.raises(ParseError):
        parse_recipe("set wobble=1")


# ---- kNN -------------------------------------------------------------------

def brute_knn(coords, k):
    m = len(coords)
    out = []
    for i in range(m):
        cand = []
        for j in range(m):
            if j != i:
                d = sum((coords[i, a] - coords[j, a]) ** 2 for a in range(3))
                cand.append((d, j))
        cand.sort()
        out.append([j for _, j in cand[:k]])
    return np.array(out)


def test_collinear_tie_breaks_to_smaller_index():
    g = knn_graph(np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]), 1)
    assert g.neighbors[1, 0] == 0


def test_saturated_k_connects_everything():
    pts = np.random.default_rng(0).random((6, 3))
    g = knn_graph(pts, 10)
    for i in range(6):
        assert sorted(g.neighbors[i].tolist()) == [j for j in range(6) if j != i]


def test_knn_matches_brute_force():
    pts = np.random.default_rng(3).random((200, 3))
    g = knn_graph(pts, 8)
    np.testing.assert_array_equal(g.neighbors, brute_knn(pts, 8))


def test_knn_on_lattice_with_ties():
    x, y = np.meshgrid(np.arange(6.0), np.arange(5.0))
    pts = np.stack([x.ravel(), y.ravel(), np.zeros(30)], axis=1)
    np.testing.assert_array_equal(knn_graph(pts, 5).neighbors, brute_knn(pts, 5))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 12))
def test_knn_graph_invariants(seed, m, k):
    pts = np.round(np.random.default_rng(seed).random((m, 3)), 1)  # rounding forces ties
    g = knn_graph(pts, k)
    assert g.neighbors.shape == (m, min(k, m - 1))
    for i in range(m):
        row = g.neighbors[i].tolist()
        assert i not in row and len(set(row)) == len(row)
    np.testing.assert_array_equal(g.neighbors, brute_knn(pts, min(k, m - 1)))


# ---- normals -----------------------------------------------------------------

def test_planar_normals():
    rng = np.random.default_rng(1)
    xy = rng.random((50, 2))
    flat = make_cloud(np.column_stack([xy, np.zeros(50)]))
    n = estimate_normals(flat, knn_graph(flat, 8)).normals
    np.testing.assert_allclose(n, np.tile([0.0, 0.0, 1.0], (50, 1)), atol=1e-9)
    side = make_cloud(np.column_stack([np.zeros(50), xy]))
    n = estimate_normals(side, knn_graph(side, 8)).normals
    np.testing.assert_allclose(n, np.tile([1.0, 0.0, 0.0], (50, 1)), atol=1e-9)


def test_sphere_normals_close_to_radial():
    rng = np.random.default_rng(2)
    d = rng.standard_normal((800, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cloud = make_cloud(d + rng.normal(0, 0.005, d.shape))
    n = estimate_normals(cloud, knn_graph(cloud, 12)).normals
    cosang = np.clip(np.abs((n * d).sum(axis=1)), 0, 1)
    assert np.degrees(np.arccos(cosang)).mean() < 10.0


def test_collinear_points_flagged_degenerate():
    cloud = make_cloud(np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)]))
    out, flags = estimate_normals(cloud, knn_graph(cloud, 4), return_flags=True)
    assert flags.all()
    np.testing.assert_array_equal(out.normals, np.tile([0.0, 0.0, 1.0], (10, 1)))


def test_cloud_validation():
    with pytest.raises(EmptyInputError):
        make_cloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        make_cloud(np.zeros((3, 3)), colors=np.zeros((2, 3)))
    cloud = make_cloud(np.zeros((3, 3)), ids=[5, 9, 7])
    np.testing.assert_array_equal(cloud.index_of([7, 5]), [2, 0])
    with pytest.raises(KeyError):
        cloud.index_of([4])


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError, match="unique"):
        make_cloud(np.zeros((2, 3)), ids=[1, 1])
