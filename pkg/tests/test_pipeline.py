import os
from dataclasses import replace

import numpy as np
import pytest

from misc.errors import UnknownMaskError
from misc.parse_config import PipelineConfig
from scene.scene_model import LabelMap, MaskRef
from transform.export_result import read_result, write_result
from transform.pipeline import extract_background, extract_object, run


def _hand_scene(scene_factory, **kwargs):
    return scene_factory([[[1, 2], [0, 1]], [[3, 3], [1, 0]]], **kwargs)


def test_extract_background_rules(scene_factory):
    points = np.zeros((2, 2, 2, 3))
    points[..., 2] = 1.0
    points[0, 0, 1] = (0, 0, 5.0)
    points[1, 1, 1] = (np.nan, 0, 0)
    background = {1: LabelMap(np.array([[1, 0], [0, 0]], dtype=np.uint16))}
    scene = _hand_scene(scene_factory, points=points, background=background)

    masks = extract_background(scene, PipelineConfig())
    # Far point, label 0, background mask and non-finite point
    assert masks[0].tolist() == [[False, True], [True, False]]
    assert masks[1].tolist() == [[True, False], [False, True]]

    wide = extract_background(scene, PipelineConfig(reach_radius=10.0))
    assert wide[0].tolist() == [[False, False], [True, False]]


def test_extract_background_custom_origin(scene_factory):
    scene = _hand_scene(scene_factory)
    masks = extract_background(scene, PipelineConfig(workspace_origin=(0.0, 0.0, 5.0), reach_radius=1.0))
    assert all(mask.all() for mask in masks.values())


def test_run_without_matches_gives_one_class_per_mask(scene_factory):
    scene = _hand_scene(scene_factory)
    result = run(scene, PipelineConfig(enable_3d=False, threads=1))

    assert result.num_classes == 4
    assert result.class_registry[0] == []
    assert [refs for class_id, refs in sorted(result.class_registry.items()) if class_id] == \
        [[MaskRef(0, 1)], [MaskRef(0, 2)], [MaskRef(1, 1)], [MaskRef(1, 3)]]
    assert result.label_maps[0].tolist() == [[1, 2], [0, 1]]
    assert result.label_maps[1].tolist() == [[4, 4], [3, 0]]
    assert result.stats['rounds2d'] == 0
    assert len(result.cloud) == 6


def test_run_consumed_mask_maps_to_background(scene_factory):
    points = np.zeros((2, 2, 2, 3))
    points[..., 2] = 1.0
    points[0, 0, 1] = (0, 0, 5.0)
    scene = _hand_scene(scene_factory, points=points)
    result = run(scene, PipelineConfig(enable_3d=False, threads=1))

    assert result.class_registry[0] == [MaskRef(0, 2)]
    assert result.class_of((0, 2)) == 0
    assert extract_object(result, 0, 2).is_background
    assert extract_object(result, 0, 2).points.empty


def test_run_merges_matched_masks(scene_factory):
    corr = (0, 1, [[0, 0], [1, 1]], [[0, 0], [0, 1]], [1.0, 1.0])
    scene = _hand_scene(scene_factory, correspondences=[corr])
    result = run(scene, PipelineConfig(tau2d_override=0.5, enable_3d=False, threads=1))

    # (0,1) shares one match with (1,3) and one with (1,1): ratios 0.5 and 1.0
    assert result.class_of((0, 1)) == result.class_of((1, 3)) == result.class_of((1, 1))
    assert result.class_of((0, 2)) != result.class_of((0, 1))


def test_extract_object_unknown_mask(scene_factory):
    result = run(_hand_scene(scene_factory), PipelineConfig(enable_3d=False, threads=1))
    with pytest.raises(UnknownMaskError):
        extract_object(result, 0, 9)
    with pytest.raises(UnknownMaskError):
        extract_object(result, 7, 1)


def _object_of_classes(result, gt):
    objects = {}
    for index, labels in result.label_maps.items():
        truth = gt[index].labels
        for class_id in np.unique(labels[labels != 0]):
            objects.setdefault(int(class_id), set()).update(np.unique(truth[labels == class_id]).tolist())
    return objects


def test_exact_synth_classes_are_pure(exact_synth):
    scene, gt = exact_synth
    result = run(scene, PipelineConfig(tau2d_override=0.01, threads=2))

    objects = _object_of_classes(result, gt)
    assert all(len(ids) == 1 and 0 not in ids for ids in objects.values())
    assert {next(iter(ids)) for ids in objects.values()} == {1, 2, 3, 4, 5}
    assert result.num_classes >= 5


def test_fragmented_synth_never_mixes_objects(fragmented_synth):
    scene, gt = fragmented_synth
    result = run(scene, PipelineConfig(threads=2))

    for ids in _object_of_classes(result, gt).values():
        assert len(ids) == 1

    # Fragments strictly fewer classes than masks
    assert result.num_classes < result.stats['masks'] - result.stats['masks_background']


def test_conservation_of_foreground(fragmented_synth):
    scene, _ = fragmented_synth
    config = PipelineConfig(threads=1)
    result = run(scene, config)
    background = extract_background(scene, config)

    for image in scene.images:
        painted = result.label_maps[image.index]
        assert painted.shape == (image.height, image.width)
        assert np.array_equal(painted != 0, ~background[image.index])

    cloud_classes = set(result.cloud['class_id'].unique().tolist())
    assert 0 not in cloud_classes
    assert cloud_classes <= set(range(1, result.num_classes + 1))


def test_class_ids_follow_smallest_mask(fragmented_synth):
    scene, _ = fragmented_synth
    result = run(scene, PipelineConfig(threads=1))
    firsts = [min(refs) for class_id, refs in sorted(result.class_registry.items()) if class_id]
    assert firsts == sorted(firsts)


def test_extract_object_same_class_same_points(fragmented_synth):
    scene, _ = fragmented_synth
    result = run(scene, PipelineConfig(threads=1))

    class_id, refs = next((c, refs) for c, refs in sorted(result.class_registry.items()) if c and len(refs) > 1)
    first = extract_object(result, *refs[0])
    second = extract_object(result, *refs[-1])

    assert first.class_id == second.class_id == class_id
    assert not first.points.empty
    assert first.points.equals(second.points)
    assert (first.points['class_id'] == class_id).all()


def test_thread_count_does_not_change_output(tmp_path, fragmented_synth):
    scene, _ = fragmented_synth
    config = PipelineConfig(seed=4)
    single = write_result(run(scene, replace(config, threads=1)), str(tmp_path / 'one'), debug=True)
    many = write_result(run(scene, replace(config, threads=8)), str(tmp_path / 'many'), debug=True)

    assert [os.path.basename(path) for path in single] == [os.path.basename(path) for path in many]
    for left, right in zip(single, many):
        assert open(left, 'rb').read() == open(right, 'rb').read(), os.path.basename(left)


def test_result_directory_round_trip(tmp_path, exact_synth):
    scene, _ = exact_synth
    result = run(scene, PipelineConfig(threads=1))
    write_result(result, str(tmp_path), debug=True)
    loaded = read_result(str(tmp_path))

    assert loaded.class_registry == result.class_registry
    assert sorted(loaded.label_maps) == sorted(result.label_maps)
    for index, labels in result.label_maps.items():
        assert np.array_equal(loaded.label_maps[index], labels)
    assert len(loaded.cloud) == len(result.cloud)
    assert loaded.partition_final == result.partition_final
    assert loaded.config.to_dict() == result.config.to_dict()


def test_3d_stage_only_merges_classes(fragmented_synth):
    scene, _ = fragmented_synth
    flat = run(scene, PipelineConfig(enable_3d=False, threads=2))
    full = run(scene, PipelineConfig(threads=2))

    assert full.num_classes <= flat.num_classes
    for class_id, refs in flat.class_registry.items():
        if class_id:
            assert len({full.class_of(ref) for ref in refs}) == 1
