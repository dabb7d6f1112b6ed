from dataclasses import replace

import numpy as np
import pytest

from misc.errors import EmptyCloudError
from misc.parse_config import PipelineConfig
from scene.scene_model import MaskIndex
from transform.contraction import Partition
from transform.lift3d import SuperVertexCloud, build_3d_graph, directed_chamfer, refine, supervertex_cloud


def brute_force_directed(x_points, y_points):
    x_points = np.asarray(x_points, dtype=np.float64)
    y_points = np.asarray(y_points, dtype=np.float64)
    squared = np.sum((x_points[:, None, :] - y_points[None, :, :]) ** 2, axis=2)
    return float(np.mean(squared.min(axis=1)))


def _cloud(sv, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return SuperVertexCloud(sv, points, np.zeros((len(points), 3), dtype=np.int64))


def test_directed_chamfer_examples():
    x_points = [[0, 0, 0]]
    y_points = [[3, 0, 0], [0, 4, 0]]
    assert directed_chamfer(x_points, y_points) == pytest.approx(9.0)
    assert directed_chamfer(y_points, x_points) == pytest.approx(12.5)
    assert directed_chamfer(y_points, y_points) == 0.0


def test_directed_chamfer_rejects_empty_cloud():
    with pytest.raises(EmptyCloudError):
        directed_chamfer(np.zeros((0, 3)), [[0, 0, 0]])
    with pytest.raises(EmptyCloudError):
        directed_chamfer([[0, 0, 0]], np.zeros((0, 3)))


def test_directed_chamfer_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(50):
        x_points = rng.normal(size=(int(rng.integers(1, 2001)), 3))
        y_points = rng.normal(size=(int(rng.integers(1, 2001)), 3))
        expected = brute_force_directed(x_points, y_points)
        assert directed_chamfer(x_points, y_points) == pytest.approx(expected, rel=1e-12, abs=0)


def test_directed_chamfer_subset_is_zero_and_translation_invariant():
    rng = np.random.default_rng(6)
    y_points = rng.random((300, 3))
    x_points = y_points[::3]
    assert directed_chamfer(x_points, y_points) == 0.0

    other = rng.random((200, 3))
    shift = np.array([0.3, -1.2, 2.0])
    assert directed_chamfer(other + shift, y_points + shift) == pytest.approx(directed_chamfer(other, y_points), abs=1e-9)


def test_build_3d_graph_single_and_far_clouds():
    single = build_3d_graph({0: _cloud(0, [[0, 0, 0]])}, 5e-4)
    assert single.num_vertices == 1 and single.num_edges == 0

    rng = np.random.default_rng(8)
    box_a = rng.uniform(0, 0.04, size=(150, 3))
    box_b = box_a + [0.14, 0, 0]
    graph = build_3d_graph({0: _cloud(0, box_a), 7: _cloud(7, box_b)}, 5e-4)
    assert graph.num_edges == 0


def test_build_3d_graph_subsumed_fragment():
    rng = np.random.default_rng(9)
    bottle = rng.uniform(0, 0.05, size=(2000, 3))
    fragment = bottle[bottle[:, 0] < 0.01] + rng.normal(0, 1e-4, size=(1, 3))
    clouds = {0: _cloud(0, bottle), 3: _cloud(3, fragment), 5: _cloud(5, [])}

    graph = build_3d_graph(clouds, 5e-4, threads=3)
    assert graph.vertices.tolist() == [0, 3]
    assert graph.edge_set() == {(0, 3)}


def test_build_3d_graph_edges_grow_with_threshold():
    rng = np.random.default_rng(10)
    clouds = {sv: _cloud(sv, rng.uniform(0, 0.1, size=(40, 3)) + [0.05 * sv, 0, 0]) for sv in range(8)}
    previous = set()
    for tau in (1e-5, 1e-4, 5e-4, 2e-3, 1e-2):
        edges = build_3d_graph(clouds, tau).edge_set()
        assert previous <= edges
        previous = edges


def test_build_3d_graph_caps_large_clouds():
    rng = np.random.default_rng(11)
    points = rng.random((500, 3)) * 0.01
    clouds = {0: _cloud(0, points), 1: _cloud(1, points)}
    assert build_3d_graph(clouds, 1e-3, max_cloud_points=100, seed=2).edge_set() == {(0, 1)}


def test_supervertex_cloud_counts_and_confidence(scene_factory):
    confidence = [np.array([[1.0, 1.0, 0.2]]), np.array([[0.9, 0.5, 1.0]])]
    scene = scene_factory([[[1, 1, 2]], [[3, 0, 3]]], confidence=confidence)
    index = MaskIndex.from_label_maps({image.index: image.label_map.labels for image in scene.images})
    # (0,1) and (1,3) form one supervertex, (0,2) stays alone
    partition = Partition.from_assignment({index.vertex((0, 1)): 0, index.vertex((1, 3)): 0, index.vertex((0, 2)): 1})

    clouds = supervertex_cloud(partition, scene, 0.5, index)
    merged = clouds[index.vertex((0, 1))]
    assert len(merged) == 4
    assert merged.source.tolist() == [[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 2, 0]]
    assert clouds[index.vertex((0, 2))].is_empty

    assert all(cloud.is_empty for cloud in supervertex_cloud(partition, scene, 1.1, index).values())


def test_supervertex_cloud_synth_sizes(exact_synth):
    scene, _ = exact_synth
    labels = {image.index: image.label_map.labels for image in scene.images}
    index = MaskIndex.from_label_maps(labels)
    partition = Partition.identity(index.vertices)

    clouds = supervertex_cloud(partition, scene, 0.5, index)
    for vertex, cloud in clouds.items():
        ref = index.ref(vertex)
        assert len(cloud) == int(np.sum(labels[ref.image_index] == ref.local_id))


def test_refine_keeps_partition_when_3d_disabled(exact_synth):
    scene, _ = exact_synth
    labels = {image.index: image.label_map.labels for image in scene.images}
    index = MaskIndex.from_label_maps(labels)
    partition = Partition.identity(index.vertices)

    for config in (PipelineConfig(enable_3d=False), PipelineConfig(tau3d=0)):
        assert refine(partition, scene, config, index) is partition


def test_refine_only_coarsens(exact_synth):
    scene, gt = exact_synth
    labels = {image.index: np.where(scene.background[image.index].labels != 0, 0, image.label_map.labels)
              for image in scene.images}
    index = MaskIndex.from_label_maps(labels)
    partition = Partition.identity(index.vertices)

    final = refine(partition, scene, replace(PipelineConfig(), threads=2), index, labels)
    for members in partition.members.values():
        assert len({final.assignment[v] for v in members}) == 1

    # Separated objects never share a supervertex
    for members in final.members.values():
        objects = set()
        for vertex in members:
            ref = index.ref(vertex)
            objects |= set(np.unique(gt[ref.image_index].labels[labels[ref.image_index] == ref.local_id]).tolist())
        assert len(objects) == 1
