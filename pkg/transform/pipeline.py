'''
End-to-end segmentation: background extraction, the 2D correspondence stage, the 3D
structural stage and assembly of globally consistent class ids.
'''

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from misc.errors import ConfigError, InvariantViolation, SceneValidationError, SegFuseError, UnknownMaskError
from misc.log_utils import log_step, log_warning
from misc.parse_config import PipelineConfig
from scene.formats import read_labelmap
from scene.scene_model import MaskIndex, MaskRef, Scene
from transform.contraction import Partition, contract
from transform.lift3d import LABEL_RANGE, refine
from transform.match2d import build_2d_graph

CLOUD_COLUMNS = ['x', 'y', 'z', 'class_id', 'source_image', 'pixel_x', 'pixel_y', 'confidence']


@dataclass
class SegmentationResult:
    '''
    Output of one run.

    `class_registry` maps every class id to the sorted MaskRefs it holds; class 0 is the
    background and lists the masks consumed by it entirely. `label_maps` holds the global
    label map M̂ of every image and `cloud` the merged labeled point cloud.
    '''
    class_registry: dict
    label_maps: dict
    cloud: pd.DataFrame
    stats: dict = field(default_factory=dict)
    config: Optional[PipelineConfig] = None
    partition_2d: Optional[Partition] = None
    partition_final: Optional[Partition] = None
    mask_refs: list = field(default_factory=list)

    def __post_init__(self):
        self._class_of = {ref: class_id for class_id, refs in self.class_registry.items() for ref in refs}

    @property
    def num_classes(self) -> int:
        '''Number of foreground classes.'''
        return len([class_id for class_id in self.class_registry if class_id != 0])

    def class_of(self, ref) -> int:
        ref = MaskRef(int(ref[0]), int(ref[1]))
        if ref not in self._class_of:
            raise UnknownMaskError(f"Mask {ref.local_id} of image {ref.image_index} is not part of the scene")
        return self._class_of[ref]


@dataclass(frozen=True)
class ExtractedObject:
    class_id: int
    points: pd.DataFrame

    @property
    def is_background(self) -> bool:
        return self.class_id == 0


def workspace_origin(scene: Scene, config: PipelineConfig) -> np.ndarray:

    if config.workspace_origin is not None:
        return np.asarray(config.workspace_origin, dtype=np.float64)

    # Frames are expressed relative to the first capture, so its camera is the reference
    first = min(scene.images, key=lambda image: image.index)
    return first.pose.position


def _configured_background_maps(scene: Scene, config: PipelineConfig) -> dict:

    known = {image.index: image for image in scene.images}
    maps = {}
    for index, path in config.background_mask_paths.items():
        if index not in known:
            raise ConfigError(f"background mask given for unknown image {index}")
        label_map = read_labelmap(path)
        if (label_map.width, label_map.height) != (known[index].width, known[index].height):
            raise SceneValidationError(f"background mask {path} does not match the size of image {index}")
        maps[index] = label_map

    return maps


def extract_background(scene: Scene, config: PipelineConfig) -> dict:
    '''
    Decide which pixels belong to the background class.\n

    Parameters:
        `scene (Scene)` - Validated scene.\n
        `config (PipelineConfig)` - Provides reach_radius, workspace_origin and background_mask_paths.\n

    Return:
        `background (dict)` - Image index to boolean (H, W) grid. A pixel is background when its
        point lies farther than reach_radius from the workspace origin (non-finite points count as
        far), when a background mask marks it, or when its label is 0.\n
    '''

    origin = workspace_origin(scene, config)
    provided = dict(scene.background or {})
    provided.update(_configured_background_maps(scene, config))

    background = {}
    for image in scene.images:
        distance = np.linalg.norm(image.point_map.points.astype(np.float64) - origin, axis=2)
        within_reach = distance <= config.reach_radius
        mask = ~within_reach | (image.label_map.labels == 0)
        if image.index in provided:
            mask |= provided[image.index].labels != 0
        background[image.index] = mask

    return background


def _assign_classes(final: Partition, mask_index: MaskIndex, consumed: list) -> dict:

    # Supervertex ids are minimum member vertex ids, and vertex ids follow MaskRef order
    registry = {0: sorted(consumed)}
    for class_id, supervertex in enumerate(sorted(final.members), start=1):
        registry[class_id] = sorted(mask_index.ref(vertex) for vertex in final.members[supervertex])

    return registry


def _paint_label_maps(scene: Scene, registry: dict, effective: dict) -> dict:

    lookups = {image.index: np.zeros(LABEL_RANGE, dtype=np.uint16) for image in scene.images}
    for class_id, refs in registry.items():
        if class_id == 0:
            continue
        for ref in refs:
            lookups[ref.image_index][ref.local_id] = class_id

    return {index: lookups[index][labels] for index, labels in effective.items()}


def _build_cloud(scene: Scene, painted: dict, min_point_conf: float) -> pd.DataFrame:

    frames = []
    for image in sorted(scene.images, key=lambda image: image.index):
        classes = painted[image.index]
        confidence = image.point_map.confidence
        keep = (classes != 0) & (confidence >= confidence.dtype.type(min_point_conf))
        keep &= np.isfinite(image.point_map.points).all(axis=2)
        ys, xs = np.nonzero(keep)
        points = image.point_map.points[ys, xs].astype(np.float32)
        frames.append(pd.DataFrame({
            'x': points[:, 0], 'y': points[:, 1], 'z': points[:, 2],
            'class_id': classes[ys, xs].astype(np.int64),
            'source_image': np.full(len(xs), image.index, dtype=np.int64),
            'pixel_x': xs.astype(np.int64),
            'pixel_y': ys.astype(np.int64),
            'confidence': confidence[ys, xs].astype(np.float32),
        }, columns=CLOUD_COLUMNS))

    return pd.concat(frames, ignore_index=True)


def _check_conservation(scene: Scene, painted: dict, effective: dict, background: dict) -> None:

    for image in scene.images:
        classes = painted[image.index]
        if classes.shape != image.label_map.labels.shape:
            raise InvariantViolation(f"global label map of image {image.index} has the wrong size")
        if int(np.bincount(classes.ravel()).sum()) != image.width * image.height:
            raise InvariantViolation(f"class pixel counts of image {image.index} do not cover the image")
        if np.any((classes == 0) != background[image.index]):
            raise InvariantViolation(f"image {image.index}: foreground pixels lost or background pixels classed")
        if np.any((effective[image.index] != 0) != (classes != 0)):
            raise InvariantViolation(f"image {image.index}: mask pixels without a class")


def run(scene: Scene, config: PipelineConfig) -> SegmentationResult:
    '''
    Segment a scene into globally consistent object classes.\n

    Parameters:
        `scene (Scene)` - Validated scene.\n
        `config (PipelineConfig)` - Effective configuration.\n

    Return:
        `result (SegmentationResult)` - Class registry, global label maps, labeled cloud and
        per-stage statistics. Identical for identical (scene, config) whatever the thread count.\n
    '''

    config.validate()
    scene.validate()

    background = extract_background(scene, config)
    effective = {image.index: np.where(background[image.index], 0, image.label_map.labels).astype(np.uint16)
                 for image in scene.images}

    all_masks = MaskIndex.from_label_maps({image.index: image.label_map.labels for image in scene.images})
    mask_index = MaskIndex.from_label_maps(effective)
    consumed = [ref for ref in all_masks.refs if ref not in mask_index]

    log_step("Background",
             **{"Background pixels": int(sum(mask.sum() for mask in background.values())),
                "Masks": len(all_masks),
                "Masks consumed by background": len(consumed)})

    stats = {'masks': len(all_masks), 'masks_background': len(consumed)}
    if len(mask_index) == 0:
        log_warning("no foreground masks left after background extraction")

    graph_2d = build_2d_graph(scene, config, effective, mask_index, stats)
    partition_2d = contract(graph_2d, config.seed)
    stats.update({'rounds2d': partition_2d.rounds, 'supervertices2d': len(partition_2d)})

    final = refine(partition_2d, scene, config, mask_index, effective, stats)

    registry = _assign_classes(final, mask_index, consumed)
    if len(registry) - 1 >= LABEL_RANGE:
        raise SegFuseError(f"{len(registry) - 1} classes do not fit a 16-bit label map")

    painted = _paint_label_maps(scene, registry, effective)
    _check_conservation(scene, painted, effective, background)
    cloud = _build_cloud(scene, painted, config.min_point_confidence)
    stats['classes'] = len(registry) - 1

    log_step("Segmentation",
             **{"Foreground classes": len(registry) - 1,
                "Cloud points": cloud})

    return SegmentationResult(class_registry=registry,
                              label_maps=painted,
                              cloud=cloud,
                              stats=stats,
                              config=config,
                              partition_2d=partition_2d,
                              partition_final=final,
                              mask_refs=list(mask_index.refs))


def extract_object(result: SegmentationResult, image_index: int, local_id: int) -> ExtractedObject:
    '''
    Look up the object a 2D mask belongs to and return every cloud point of its class. A mask
    consumed by the background gives the background indicator with no points.
    '''

    class_id = result.class_of((image_index, local_id))
    if class_id == 0:
        return ExtractedObject(0, result.cloud.iloc[0:0].reset_index(drop=True))

    points = result.cloud[result.cloud['class_id'] == class_id].reset_index(drop=True)
    return ExtractedObject(class_id, points)
