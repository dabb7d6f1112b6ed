from dataclasses import replace

import numpy as np
import pytest

from misc.errors import SynthSpecError
from synth.generate_scene import (Sphere, SynthSpec, build_synth_scene, corrupt_pointmaps, focal_length, generate,
                                  generate_matches, inject_oversegmentation, place_primitives, ring_poses)

TINY_SPEC = SynthSpec(width=96, height=72, seed=1)


@pytest.mark.parametrize('field, value', [
    ('n_objects', 0),
    ('n_views', 0),
    ('overseg_k', 0),
    ('match_dropout', 1.5),
    ('spurious_rate', -0.1),
    ('pointmap_noise_sigma', -1.0),
    ('fov_deg', 180.0),
    ('seed', -3),
])
def test_spec_validation(field, value):
    with pytest.raises(SynthSpecError):
        replace(SynthSpec(), **{field: value}).validate()


def test_ring_poses_are_evenly_spaced():
    poses = ring_poses(SynthSpec(n_views=3))
    angles = sorted(np.degrees(np.arctan2(pose.position[1], pose.position[0])) % 360 for pose in poses)
    assert np.diff(angles) == pytest.approx([120.0, 120.0])

    for pose in poses:
        assert np.linalg.det(pose.rotation) == pytest.approx(1.0)
        # Optical axis points at the table center
        forward = pose.rotation[:, 2]
        assert np.allclose(forward, -pose.position / np.linalg.norm(pose.position))


def test_placement_keeps_objects_apart():
    spec = SynthSpec(n_objects=8, placement_radius=0.4)
    placed = place_primitives(spec, np.random.default_rng(2))
    assert len(placed) == 8
    for i, first in enumerate(placed):
        for second in placed[i + 1:]:
            gap = np.hypot(first.center[0] - second.center[0], first.center[1] - second.center[1])
            assert gap >= first.footprint + second.footprint + spec.min_gap


def test_placement_failure_is_reported():
    with pytest.raises(SynthSpecError, match='could not place'):
        place_primitives(SynthSpec(n_objects=40, placement_radius=0.05, max_placement_tries=20),
                         np.random.default_rng(0))


def test_rendered_points_lie_on_the_surface():
    spec = replace(TINY_SPEC, n_objects=1, n_views=1, sphere_fraction=1.0)
    (sphere,) = place_primitives(spec, np.random.default_rng(spec.seed))
    assert isinstance(sphere, Sphere)

    scene, gt = generate(spec)
    on_object = gt[0].labels == 1
    assert on_object.any()

    points = scene.images[0].point_map.points[on_object]
    distances = np.linalg.norm(points - np.asarray(sphere.center), axis=1)
    assert distances == pytest.approx(np.full(len(points), sphere.radius), abs=1e-6)


def test_generated_masks_match_ground_truth():
    scene, gt = generate(TINY_SPEC)
    for image in scene.images:
        labels = image.label_map.labels
        table = scene.background[image.index].labels != 0
        objects = gt[image.index].labels
        # Every proposal is exactly one object or the table
        for local_id in image.label_map.mask_ids():
            region = labels == local_id
            assert len(np.unique(objects[region])) == 1
            assert np.all(table[region]) or not np.any(table[region])


def test_oversegmentation_preserves_masks():
    rng = np.random.default_rng(3)
    grids = {0: rng.integers(0, 4, size=(40, 50)).astype(np.uint16), 1: np.zeros((10, 10), dtype=np.uint16)}
    fragmented = inject_oversegmentation(grids, 4, seed=5)

    assert np.array_equal(fragmented[1], grids[1])
    for local_id in (1, 2, 3):
        region = grids[0] == local_id
        fragments = np.unique(fragmented[0][region])
        assert 1 <= len(fragments) <= 4
        assert 0 not in fragments
        # Fragments never spill outside their source mask
        for fragment in fragments:
            assert np.all(region[fragmented[0] == fragment])
    assert np.array_equal(fragmented[0] == 0, grids[0] == 0)


def test_oversegmentation_keeps_protected_masks_whole():
    grid = {0: np.ones((20, 20), dtype=np.uint16)}
    fragmented = inject_oversegmentation(grid, 5, seed=0, keep_whole={0: [1]})
    assert np.unique(fragmented[0]).tolist() == [1]

    assert np.array_equal(inject_oversegmentation(grid, 1, seed=0)[0], grid[0])
    with pytest.raises(SynthSpecError):
        inject_oversegmentation(grid, 0, seed=0)


def test_exact_matches_link_the_same_object():
    scene, gt = generate(TINY_SPEC)
    matches = generate_matches(scene, gt, 0.0, 0.0, seed=0)
    assert sum(len(corr) for corr in matches) > 0

    for corr in matches:
        objects_a = gt[corr.image_a].labels[corr.pixels_a[:, 1], corr.pixels_a[:, 0]]
        objects_b = gt[corr.image_b].labels[corr.pixels_b[:, 1], corr.pixels_b[:, 0]]
        assert np.all(objects_a == objects_b)
        assert np.all(objects_a != 0)
        assert np.all(corr.confidence == 1.0)

        # Matched pixels see the same surface point, within two pixel footprints at that depth
        pose_b = scene.image(corr.image_b).pose
        points_a = scene.image(corr.image_a).point_map.points[corr.pixels_a[:, 1], corr.pixels_a[:, 0]]
        points_b = scene.image(corr.image_b).point_map.points[corr.pixels_b[:, 1], corr.pixels_b[:, 0]]
        points_a, points_b = points_a.astype(np.float64), points_b.astype(np.float64)
        depth = ((points_a - pose_b.position) @ pose_b.rotation)[:, 2]
        gaps = np.linalg.norm(points_a - points_b, axis=1)
        assert np.all(gaps <= 2.0 * depth / focal_length(TINY_SPEC) + 1e-12)


def test_dropout_and_spurious_counts():
    scene, gt = generate(TINY_SPEC)
    exact = generate_matches(scene, gt, 0.0, 0.0, seed=0)

    assert all(len(corr) == 0 for corr in generate_matches(scene, gt, 1.0, 0.0, seed=0))

    noisy = generate_matches(scene, gt, 0.0, 0.5, seed=0)
    for clean, corr in zip(exact, noisy):
        n_exact = len(clean)
        assert len(corr) == n_exact + n_exact // 2
        wrong = slice(n_exact, None)
        objects_a = gt[corr.image_a].labels[corr.pixels_a[wrong, 1], corr.pixels_a[wrong, 0]]
        objects_b = gt[corr.image_b].labels[corr.pixels_b[wrong, 1], corr.pixels_b[wrong, 0]]
        assert np.all(objects_a != objects_b)
        assert np.all((corr.confidence[wrong] >= 0.5) & (corr.confidence[wrong] <= 1.0))

    with pytest.raises(SynthSpecError):
        generate_matches(scene, gt, 1.5, 0.0, seed=0)


def test_pointmap_noise():
    scene, _ = generate(TINY_SPEC)
    assert corrupt_pointmaps(scene, 0.0, seed=0) is scene

    noisy = corrupt_pointmaps(scene, 0.01, seed=0)
    offsets = np.concatenate([(after.point_map.points - before.point_map.points).reshape(-1)
                              for before, after in zip(scene.images, noisy.images)])
    assert np.std(offsets) == pytest.approx(0.01, rel=0.05)

    confidence = np.concatenate([image.point_map.confidence.ravel() for image in noisy.images])
    assert confidence.min() >= 0.1 and confidence.max() <= 1.0
    assert np.array_equal(noisy.images[0].label_map.labels, scene.images[0].label_map.labels)


def test_build_is_deterministic():
    spec = replace(TINY_SPEC, overseg_k=3, spurious_rate=0.1, match_dropout=0.2, pointmap_noise_sigma=0.002)
    first, _ = build_synth_scene(spec)
    second, _ = build_synth_scene(spec, threads=4)

    for a, b in zip(first.images, second.images):
        assert np.array_equal(a.label_map.labels, b.label_map.labels)
        assert np.array_equal(a.point_map.points, b.point_map.points)
    for a, b in zip(first.correspondences, second.correspondences):
        assert np.array_equal(a.pixels_a, b.pixels_a)
        assert np.array_equal(a.pixels_b, b.pixels_b)
