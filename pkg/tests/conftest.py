import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from misc.log_utils import set_verbose  # noqa: E402
from scene.scene_model import CameraPose, CorrespondenceSet, ImageMeta, LabelMap, PointMap, Scene  # noqa: E402
from synth.generate_scene import SynthSpec, build_synth_scene  # noqa: E402

SMALL_SPEC = SynthSpec(width=320, height=240, seed=3)


@pytest.fixture(autouse=True)
def quiet_logs():
    set_verbose(False)
    yield
    set_verbose(True)


def make_scene(label_grids, points=None, confidence=None, correspondences=(), poses=None, background=None):
    '''
    Small hand-made scene. Points default to z = 1 m in front of an identity camera at the
    origin, well inside the default reach radius.
    '''

    images = []
    for index, grid in enumerate(label_grids):
        grid = np.asarray(grid, dtype=np.uint16)
        height, width = grid.shape
        if points is None:
            xs, ys = np.meshgrid(np.arange(width) * 0.01, np.arange(height) * 0.01)
            image_points = np.stack([xs, ys, np.ones_like(xs)], axis=2)
        else:
            image_points = points[index]
        image_confidence = np.ones((height, width)) if confidence is None else confidence[index]
        pose = poses[index] if poses is not None else CameraPose(np.eye(3), np.zeros(3))
        images.append(ImageMeta(index, pose, LabelMap(grid), PointMap(image_points, image_confidence)))

    return Scene(images=images,
                 correspondences=[CorrespondenceSet(*corr) for corr in correspondences],
                 background=background).validate()


@pytest.fixture
def scene_factory():
    return make_scene


@pytest.fixture(scope='session')
def exact_synth():
    '''Exact 6-view, 5-object scene at reduced resolution, no fragments, no noise.'''
    return build_synth_scene(SMALL_SPEC)


@pytest.fixture(scope='session')
def fragmented_synth():
    '''Same layout with every object mask cut into up to 3 fragments.'''
    return build_synth_scene(replace(SMALL_SPEC, overseg_k=3))
