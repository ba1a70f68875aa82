import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segproto.augment import AugmentConfig, augment, correspondence_of, make_view_pair, view_seeds, voxel_keep
from segproto.errors import EmptyInputError
from segproto.pointcloud import default_room_recipe, generate_synthetic_scene, make_cloud


def scene_1000(seed=0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 2, (1000, 3)) * [1, 1, 0.5]
    colors = rng.random((1000, 3))
    normals = rng.standard_normal((1000, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return make_cloud(coords, colors, normals, ids=np.arange(1000) * 3 + 7, name="s1000")


def oracle_augment(cloud, seed, cfg):
    """Step-by-step re-derivation of the view pipeline, loop style, same draw order."""
    rng = np.random.default_rng(seed)
    pts = [list(p) for p in cloud.coords]
    lo, hi = cloud.coords.min(axis=0), cloud.coords.max(axis=0)
    ctr = [(lo[a] + hi[a]) / 2 for a in range(3)]

    def rotate(axis, ang):
        c, s = math.cos(ang), math.sin(ang)
        for p in pts:
            x, y, z = p[0] - ctr[0], p[1] - ctr[1], p[2] - ctr[2]
            if axis == "z":
                x, y = c * x - s * y, s * x + c * y
            elif axis == "x":
                y, z = c * y - s * z, s * y + c * z
            else:
                x, z = c * x + s * z, -s * x + c * z
            p[0], p[1], p[2] = x + ctr[0], y + ctr[1], z + ctr[2]

    for axis, ext in (("z", cfg.rotate_z), ("x", cfg.rotate_xy), ("y", cfg.rotate_xy)):
        if rng.random() < cfg.p_rotate:
            rotate(axis, rng.uniform(-ext, ext) * math.pi)
    for axis in (0, 1):
        if rng.random() < cfg.p_flip:
            for p in pts:
                p[axis] = 2 * ctr[axis] - p[axis]
    if rng.random() < cfg.p_jitter:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=(len(pts), 3))
        for p, n in zip(pts, noise):
            for a in range(3):
                p[a] += min(max(n[a], -cfg.jitter_clip), cfg.jitter_clip)
    # colour draws: four gated uniforms, then gated noise block (values unused here)
    for _ in range(4):
        if rng.random() < cfg.p_color:
            rng.uniform()
    if rng.random() < cfg.p_color_noise:
        rng.normal(0.0, 1.0, size=(len(pts), 3))
    # voxelize: smallest id per occupied voxel
    best = {}
    for row, (p, i) in enumerate(zip(pts, cloud.ids)):
        key = tuple(math.floor(v / cfg.voxel_size) for v in p)
        if key not in best or i < cloud.ids[best[key]]:
            best[key] = row
    rows = sorted(best.values())
    kept = [pts[r] for r in rows]
    # crop: Chebyshev xy box around a drawn centre row
    c = int(rng.integers(len(kept)))
    d = [max(abs(p[0] - kept[c][0]), abs(p[1] - kept[c][1])) for p in kept]
    count = int(round(cfg.crop_ratio * len(kept)))
    order = sorted(range(len(kept)), key=lambda j: (d[j], j))[:count]
    return sorted(cloud.ids[rows[j]] for j in order)


def test_identity_pipeline_returns_input():
    cloud = scene_1000()
    out = augment(cloud, 3, AugmentConfig.identity())
    np.testing.assert_array_equal(out.ids, cloud.ids)
    np.testing.assert_allclose(out.coords, cloud.coords, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(out.colors, cloud.colors)


def test_close_points_collapse_to_one_voxel():
    coords = np.array([[0.0101, 0.0101, 0.0101], [0.0111, 0.0101, 0.0101]])
    assert len(voxel_keep(coords, np.array([4, 2]), 0.02)) == 1
    assert voxel_keep(coords, np.array([4, 2]), 0.02).tolist() == [1]


def test_default_pipeline_matches_stepwise_oracle():
    cloud = scene_1000()
    for seed in (0, 1, 42):
        out = augment(cloud, seed, AugmentConfig())
        assert sorted(out.ids.tolist()) == oracle_augment(cloud, seed, AugmentConfig())


def test_crop_ratio_fraction():
    rng = np.random.default_rng(0)
    cloud = make_cloud(np.column_stack([rng.random((2000, 2)) * 4, np.zeros(2000)]))
    cfg = AugmentConfig(p_rotate=0.0, p_flip=0.0, p_jitter=0.0, voxel_size=0.0, crop_ratio=0.6)
    for seed in range(5):
        frac = len(augment(cloud, seed, cfg)) / len(cloud)
        assert 0.5 <= frac <= 0.7


def test_augment_deterministic_and_normals_rotate():
    cloud = scene_1000()
    a, b = augment(cloud, 9), augment(cloud, 9)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.colors, b.colors)
    np.testing.assert_allclose(np.linalg.norm(a.normals, axis=1), 1.0, atol=1e-12)


def test_identity_pair_full_diagonal():
    cloud = scene_1000()
    pair = make_view_pair(cloud, 0, AugmentConfig.identity())
    m = len(cloud)
    np.testing.assert_array_equal(pair.correspondence, np.column_stack([np.arange(m), np.arange(m)]))


def test_disjoint_views_rejected_after_attempts():
    coords = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    cloud = make_cloud(coords, name="tiny")
    cfg = AugmentConfig(p_rotate=0, p_flip=0, p_jitter=0, p_color=0, p_color_noise=0, voxel_size=0,
                        crop_ratio=0.5, min_overlap=2)
    with pytest.raises(EmptyInputError, match="tiny.*8 attempts"):
        make_view_pair(cloud, 0, cfg)


def test_default_pair_overlap_equals_set_intersection():
    cloud = generate_synthetic_scene(2, default_room_recipe())
    pair = make_view_pair(cloud, 5, AugmentConfig())
    inter = set(pair.view_q.ids.tolist()) & set(pair.view_k.ids.tolist())
    assert len(pair.correspondence) == len(inter)
    assert set(pair.overlap_ids.tolist()) == inter


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_view_pair_invariants(seed):
    cloud = scene_1000(seed % 7)
    pair = make_view_pair(cloud, seed, AugmentConfig(min_overlap=1))
    corr = pair.correspondence
    assert len(corr) >= 1
    np.testing.assert_array_equal(pair.view_q.ids[corr[:, 0]], pair.view_k.ids[corr[:, 1]])
    assert len(np.unique(corr[:, 0])) == len(corr) == len(np.unique(corr[:, 1]))
    assert np.all(np.diff(pair.overlap_q) > 0) and np.all(np.diff(pair.overlap_k) > 0)
    back = pair.swapped()
    np.testing.assert_array_equal(back.view_q.ids[back.overlap_q], back.view_k.ids[back.correspondence[:, 1]])


def test_view_seeds_differ_per_attempt():
    assert view_seeds(3, 0) != view_seeds(3, 1)
    assert view_seeds([1, 2], 0) == view_seeds([1, 2], 0)


def test_correspondence_of_partial():
    a = make_cloud(np.zeros((3, 3)), ids=[5, 1, 9])
    b = make_cloud(np.zeros((3, 3)), ids=[9, 4, 5])
    assert correspondence_of(a, b).tolist() == [[0, 2], [2, 0]]
