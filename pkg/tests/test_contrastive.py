import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from segproto import autodiff as ad
from segproto.augment import AugmentConfig, make_view_pair
from segproto.contrastive import PairSet, Samples, build_pairs, contrastive_loss, sample_points
from segproto.errors import ConfigError
from segproto.gradcheck import check_gradients
from segproto.grouping import extract_groups
from segproto.pointcloud import default_room_recipe, generate_synthetic_scene
from segproto.segmentation import SegmentMap, graph_cut_segments

ONE_POS_ONE_NEG = 0.07888973429254963   # -log(e^2.5 / (e^2.5 + 1)), scalar evaluation


def room_pair(seed=0, cfg=AugmentConfig()):
    cloud = generate_synthetic_scene(seed, default_room_recipe())
    return make_view_pair(cloud, seed, cfg)


def pairset(positive, confidence=None):
    positive = np.asarray(positive, dtype=bool)
    n, m = positive.shape
    samples = Samples(np.arange(n), np.arange(m), np.arange(n), np.arange(m))
    conf = positive.astype(float) if confidence is None else np.asarray(confidence, dtype=float)
    return PairSet("test", samples, positive, conf)


# ---- sampling -------------------------------------------------------------------

def test_full_overlap_sample_is_whole_overlap():
    pair = room_pair()
    n = len(pair.correspondence)
    s = sample_points(pair, n, 3)
    assert sorted(s.idx_q.tolist()) == pair.overlap_q.tolist()
    assert sorted(s.idx_k.tolist()) == pair.overlap_k.tolist()
    assert not s.with_replacement


def test_sampling_deterministic_and_inside_overlap():
    pair = room_pair(1)
    a, b = sample_points(pair, 64, [1, 2]), sample_points(pair, 64, [1, 2])
    np.testing.assert_array_equal(a.idx_q, b.idx_q)
    np.testing.assert_array_equal(a.idx_k, b.idx_k)
    assert set(a.idx_q.tolist()) <= set(pair.overlap_q.tolist())
    assert set(a.idx_k.tolist()) <= set(pair.overlap_k.tolist())


def test_short_overlap_samples_with_replacement():
    pair = room_pair(2)
    s = sample_points(pair, 5000, 0)
    assert s.with_replacement and len(s.idx_q) == 5000


# ---- strategies -------------------------------------------------------------------

def test_matched_points_one_positive_per_anchor():
    pair = room_pair(3)
    s = sample_points(pair, 128, 0, "matched_points")
    ps = build_pairs("matched_points", s)
    assert ps.positive.sum(axis=1).tolist() == [1] * 128
    np.testing.assert_array_equal(ps.confidence[ps.positive], 1.0)


def test_geometry_segment_matches_label_oracle():
    pair = room_pair(4)
    seg = graph_cut_segments(pair.source, pair.overlap_ids)
    s = sample_points(pair, 60, 1)
    ps = build_pairs("geometry_segment", s, segmap=seg)
    lookup = seg.as_dict()
    for i, a in enumerate(s.ids_q.tolist()):
        for j, b in enumerate(s.ids_k.tolist()):
            assert ps.positive[i, j] == (lookup[a] == lookup[b])


def test_grouping_pairs_match_double_loop():
    rng = np.random.default_rng(5)
    ids = np.arange(40)
    seg = SegmentMap(ids, rng.integers(0, 6, 40), 6)
    K = rng.dirichlet(np.ones(3), size=6)
    groups = extract_groups(K, seg)
    assert len(set(groups.point_labels.tolist())) == 3
    s = Samples(np.arange(40), np.arange(40), rng.permutation(40), rng.permutation(40))
    ps = build_pairs("segment_grouping", s, grouping=groups, segmap=seg, K=K)
    for i, a in enumerate(s.ids_q.tolist()):
        for j, b in enumerate(s.ids_k.tolist()):
            la, lb = groups.label_of([a])[0], groups.label_of([b])[0]
            assert ps.positive[i, j] == (la == lb)
            if la == lb:
                expect = K[seg.labels[a], la] * K[seg.labels[b], la]
                assert ps.confidence[i, j] == pytest.approx(expect, abs=1e-15)


def test_one_hot_grouping_degenerates_to_geometry():
    pair = room_pair(6)
    seg = graph_cut_segments(pair.source, pair.overlap_ids)
    K = np.eye(seg.num_segments, max(seg.num_segments, 4))
    groups = extract_groups(K, seg)
    s = sample_points(pair, 100, 2)
    grp = build_pairs("segment_grouping", s, grouping=groups, segmap=seg, K=K)
    geo = build_pairs("geometry_segment", s, segmap=seg)
    np.testing.assert_array_equal(grp.positive, geo.positive)
    np.testing.assert_array_equal(grp.confidence[grp.positive], 1.0)


def test_uniform_k_confidence_one_sixteenth():
    seg = SegmentMap(np.arange(6), np.array([0, 0, 1, 1, 2, 2]), 3)
    K = np.full((3, 4), 0.25)
    groups = extract_groups(K, seg)
    s = Samples(np.arange(6), np.arange(6), np.arange(6), np.arange(6))
    ps = build_pairs("segment_grouping", s, grouping=groups, segmap=seg, K=K)
    assert ps.positive.all()
    np.testing.assert_array_equal(ps.confidence, 1 / 16)


def test_spatial_grid_uses_reference_cells():
    pair = room_pair(7)
    s = sample_points(pair, 50, 0)
    ps = build_pairs("spatial_grid", s, reference=pair.source, grid_size=1.0)
    cell = {i: tuple(np.floor(pair.source.coords[pair.source.index_of([i])[0], :2]).tolist())
            for i in set(s.ids_q.tolist()) | set(s.ids_k.tolist())}
    for i, a in enumerate(s.ids_q.tolist()):
        for j, b in enumerate(s.ids_k.tolist()):
            assert ps.positive[i, j] == (cell[a] == cell[b])


def test_unknown_strategy_and_missing_inputs():
    s = Samples(np.arange(2), np.arange(2), np.arange(2), np.arange(2))
    with pytest.raises(ConfigError):
        build_pairs("nearest", s)
    with pytest.raises(ConfigError):
        build_pairs("segment_grouping", s)


# ---- loss -------------------------------------------------------------------------

def test_single_positive_no_negatives_zero():
    v = ad.tensor([[1.0, 0.0]])
    assert contrastive_loss(v, np.array([[0.3, 0.7]]), pairset([[True]]), 0.4).item() == 0.0


def test_one_positive_one_negative_scalar_value():
    vq = ad.tensor([[1.0, 0.0]])
    vk = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = contrastive_loss(vq, vk, pairset([[True, False]]), 0.4).item()
    assert loss == pytest.approx(ONE_POS_ONE_NEG, abs=1e-15)


def test_no_positives_gives_flagged_zero():
    out = contrastive_loss(ad.tensor(np.eye(2)), np.eye(2), pairset([[False, False], [False, False]]))
    assert out.item() == 0.0 and out.flags["degenerate"]


def _two_group_instance(seed=0, n=6, d=4):
    rng = np.random.default_rng(seed)
    labels_q, labels_k = rng.integers(0, 2, n), rng.integers(0, 2, n)
    positive = labels_q[:, None] == labels_k[None, :]
    conf = np.where(positive, rng.uniform(0.2, 1.0, (n, n)), 0.0)
    vk = rng.standard_normal((n, d))
    vk /= np.linalg.norm(vk, axis=1, keepdims=True)
    return rng.standard_normal((n, d)), vk, positive, conf


def test_loss_matches_double_loop_oracle():
    raw, vk, positive, conf = _two_group_instance()
    vq = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    got = contrastive_loss(ad.tensor(vq), vk, pairset(positive, conf), 0.4).item()
    assert got == pytest.approx(oracles.contrastive_loss(vq.tolist(), vk.tolist(), positive.tolist(),
                                                         conf.tolist(), 0.4), abs=1e-10)


def test_loss_gradient_finite_differences():
    raw, vk, positive, conf = _two_group_instance(1)
    ps = pairset(positive, conf)
    checks = check_gradients(lambda p: contrastive_loss(ad.l2_normalize_rows(p["v"]), vk, ps, 0.4), {"v": raw})
    assert checks[0].max_rel_error < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 5), st.integers(0, 5))
def test_loss_monotone_in_similarities(seed, row, col):
    raw, _, positive, conf = _two_group_instance(seed, n=6, d=6)
    # with v_k the identity basis, similarity s_ij is exactly v_q[i, j]
    vk = np.eye(6)
    ps = pairset(positive, conf)
    h = 1e-5
    up, down = raw.copy(), raw.copy()
    up[row, col] += h
    down[row, col] -= h
    slope = (contrastive_loss(ad.tensor(up), vk, ps, 0.4).item()
             - contrastive_loss(ad.tensor(down), vk, ps, 0.4).item()) / (2 * h)
    if positive[row, col]:
        assert slope <= 1e-9
    else:
        assert slope >= -1e-9
