from dataclasses import replace

import numpy as np
import pytest

from misc.errors import SceneValidationError, SegFuseError
from misc.parse_config import PairPolicy, PipelineConfig
from scene.scene_model import CameraPose, CorrespondenceSet, MaskIndex
from transform.match2d import (build_2d_graph, candidate_pairs, dedupe_matches, filter_confident, match_counts,
                               overlap_ratio, percentile_threshold, select_image_pairs, subsample_matches)


def _matches(n, confidence=None, seed=0):
    rng = np.random.default_rng(seed)
    pixels_a = rng.integers(0, 200, size=(n, 2))
    pixels_b = rng.integers(0, 200, size=(n, 2))
    return CorrespondenceSet(0, 1, pixels_a, pixels_b, np.ones(n) if confidence is None else confidence)


def _yaw_pose(degrees, position=(0.0, 0.0, 0.0)):
    angle = np.radians(degrees)
    rotation = np.array([[np.cos(angle), -np.sin(angle), 0], [np.sin(angle), np.cos(angle), 0], [0, 0, 1]])
    return CameraPose(rotation, np.asarray(position))


def test_filter_confident():
    matches = _matches(3, confidence=[0.3, 0.6, 0.9])
    assert filter_confident(matches, 0.5).confidence.tolist() == pytest.approx([0.6, 0.9])
    assert len(filter_confident(matches, 0.0)) == 3
    assert len(filter_confident(matches, 1.0)) == 0


def test_filter_confident_keeps_threshold_value():
    matches = _matches(2, confidence=[0.7, 0.69])
    assert len(filter_confident(matches, 0.7)) == 1


def test_dedupe_keeps_first_occurrence():
    matches = CorrespondenceSet(0, 1, [[1, 1], [2, 2], [1, 1]], [[5, 5], [6, 6], [5, 5]], [0.6, 0.7, 0.9])
    deduped = dedupe_matches(matches)
    assert deduped.pixels_a.tolist() == [[1, 1], [2, 2]]
    assert deduped.confidence.tolist() == pytest.approx([0.6, 0.7])


def test_subsample_identity_below_budget():
    matches = _matches(5)
    assert subsample_matches(matches, 10, seed=0) is matches


def test_subsample_is_reproducible():
    matches = _matches(20000)
    first = subsample_matches(matches, 10000, seed=4)
    second = subsample_matches(matches, 10000, seed=4)
    other = subsample_matches(matches, 10000, seed=5)

    assert len(first) == len(other) == 10000
    assert np.array_equal(first.pixels_a, second.pixels_a)
    assert not np.array_equal(first.pixels_a, other.pixels_a)


def test_candidate_pairs_identical_poses():
    poses = [CameraPose(np.eye(3), np.zeros(3))] * 4
    assert candidate_pairs(poses, PairPolicy(k_nearest=3)) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def test_candidate_pairs_opposite_cameras():
    poses = [_yaw_pose(0), _yaw_pose(180)]
    assert candidate_pairs(poses, PairPolicy(max_angle_deg=60)) == []


def test_candidate_pairs_ring_neighbours():
    poses = [_yaw_pose(45 * i, (np.cos(np.pi / 4 * i), np.sin(np.pi / 4 * i), 0)) for i in range(8)]
    pairs = candidate_pairs(poses, PairPolicy(max_angle_deg=180, max_translation_m=10, k_nearest=2))
    assert pairs == sorted([(i, i + 1) for i in range(7)] + [(0, 7)])


def test_select_image_pairs_sparse_views_use_every_pair(scene_factory):
    poses = [_yaw_pose(0), _yaw_pose(180), _yaw_pose(90)]
    scene = scene_factory([[[1]], [[1]], [[1]]], poses=poses)
    assert select_image_pairs(scene, PipelineConfig()) == [(0, 1), (0, 2), (1, 2)]
    assert select_image_pairs(scene, PipelineConfig(sparse_view_max_images=2,
                                                     pair_policy=PairPolicy(max_angle_deg=100))) == [(0, 2), (1, 2)]


def test_match_counts_hand_example():
    label_maps = {0: np.array([[1, 1], [0, 0]]), 1: np.array([[2, 0], [0, 0]])}
    corr = CorrespondenceSet(0, 1, [[0, 0], [1, 0], [0, 1]], [[0, 0], [0, 0], [0, 0]], [1, 1, 1])
    table = match_counts(label_maps, [corr])

    assert len(table) == 1
    assert table.get((0, 1), (1, 2)) == 2
    assert table.get((1, 2), (0, 1)) == 2


def test_match_counts_empty_and_background():
    label_maps = {0: np.array([[1]]), 1: np.array([[0]])}
    assert len(match_counts(label_maps, [])) == 0
    assert len(match_counts(label_maps, [CorrespondenceSet(0, 1, [[0, 0]], [[0, 0]], [1])])) == 0


def test_match_counts_ignores_thread_count():
    rng = np.random.default_rng(2)
    label_maps = {i: rng.integers(0, 6, size=(30, 30)) for i in range(3)}
    corrs = [CorrespondenceSet(a, b, rng.integers(0, 30, size=(500, 2)), rng.integers(0, 30, size=(500, 2)), np.ones(500))
             for a, b in [(0, 1), (0, 2), (1, 2)]]
    assert match_counts(label_maps, corrs, threads=1).frame.equals(match_counts(label_maps, corrs, threads=4).frame)


def test_overlap_ratio():
    assert overlap_ratio(0, 10, 10) == 0.0
    assert overlap_ratio(40, 100, 50) == pytest.approx(0.8)
    assert overlap_ratio(25, 25, 25) == 1.0
    assert overlap_ratio(30, 25, 40) == 1.0
    with pytest.raises(SceneValidationError):
        overlap_ratio(1, 0, 5)


def test_percentile_threshold():
    ratios = [round(0.1 * i, 1) for i in range(10, 0, -1)]
    assert percentile_threshold(ratios, 78) == pytest.approx(0.8)
    assert percentile_threshold(ratios, 70) == pytest.approx(0.7)
    assert percentile_threshold(ratios, 100) == pytest.approx(1.0)
    assert percentile_threshold([0.42], 5) == pytest.approx(0.42)
    with pytest.raises(SegFuseError, match='no candidate pairs'):
        percentile_threshold([], 78)


def _two_view_scene(scene_factory, matches_a, matches_b):
    grids = [[[1, 1, 2, 2]], [[3, 3, 4, 4]]]
    corr = (0, 1, matches_a, matches_b, np.ones(len(matches_a)))
    return scene_factory(grids, correspondences=[corr])


def test_build_2d_graph_no_matches(scene_factory):
    scene = scene_factory([[[1, 2]], [[1, 0]]])
    graph = build_2d_graph(scene, PipelineConfig(threads=1))
    assert graph.num_vertices == 3
    assert graph.num_edges == 0


def test_build_2d_graph_override_threshold(scene_factory):
    scene = _two_view_scene(scene_factory, [[0, 0], [1, 0], [2, 0]], [[0, 0], [1, 0], [2, 0]])
    stats = {}
    graph = build_2d_graph(scene, PipelineConfig(tau2d_override=0.6, threads=1), stats=stats)

    index = MaskIndex([(0, 1), (0, 2), (1, 3), (1, 4)])
    # Mask (0,1) fully matched to (1,3); (0,2) only half matched to (1,4)
    assert graph.edge_set() == {(index.vertex((0, 1)), index.vertex((1, 3)))}
    assert stats['tau2d'] == pytest.approx(0.6)


def test_build_2d_graph_removing_matches_never_adds_edges(scene_factory):
    config = PipelineConfig(tau2d_override=0.5, threads=1)
    full = _two_view_scene(scene_factory, [[0, 0], [1, 0], [2, 0], [3, 0]], [[0, 0], [1, 0], [2, 0], [3, 0]])
    fewer = _two_view_scene(scene_factory, [[0, 0], [2, 0]], [[0, 0], [2, 0]])
    assert build_2d_graph(fewer, config).edge_set() <= build_2d_graph(full, config).edge_set()


def test_build_2d_graph_exact_synth_links_only_same_object(exact_synth):
    scene, gt = exact_synth
    graph = build_2d_graph(scene, PipelineConfig(tau2d_override=0.01, threads=2))

    labels = {image.index: image.label_map.labels for image in scene.images}
    index = MaskIndex.from_label_maps(labels)
    object_of = {}
    for ref in index.refs:
        ids = np.unique(gt[ref.image_index].labels[labels[ref.image_index] == ref.local_id])
        object_of[index.vertex(ref)] = int(ids.max())

    assert graph.num_edges > 0
    for u, v in graph.edge_set():
        assert object_of[u] == object_of[v] != 0


def test_build_2d_graph_deterministic_across_threads(exact_synth):
    scene, _ = exact_synth
    config = PipelineConfig(max_matches_per_pair=50)
    single = build_2d_graph(scene, replace(config, threads=1))
    many = build_2d_graph(scene, replace(config, threads=6))
    assert single.edge_set() == many.edge_set()
