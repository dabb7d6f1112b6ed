'''
Write a SegmentationResult to an output directory and read it back.

    classes.json            class registry, configuration echo, seed and stage statistics
    config_echo.json        fully resolved configuration, usable as --config for a rerun
    mhat_<index>.pgm        global label map of every image
    cloud.ply               merged labeled point cloud
    partition_debug.json    per-stage partitions (only with debug=True)
'''

import json
import os
import re

from misc.errors import SceneValidationError
from misc.log_utils import log_step
from misc.parse_config import PipelineConfig
from scene.formats import read_cloud_ply, read_labelmap, write_cloud_ply, write_labelmap
from scene.scene_model import LabelMap, MaskRef
from transform.contraction import Partition
from transform.pipeline import SegmentationResult

MHAT_PATTERN = re.compile(r'^mhat_(\d+)\.pgm$')


def _write_json(payload: dict, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as json_file:
        json.dump(payload, json_file, indent=2)
        json_file.write('\n')


def _read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise SceneValidationError(f"Missing file: {path}")
    with open(path, 'r', encoding='utf-8') as json_file:
        return json.load(json_file)


def write_result(result: SegmentationResult, out_dir: str, debug: bool = False) -> list:
    '''
    Write every output artifact of a run.\n

    Parameters:
        `result (SegmentationResult)` - Output of pipeline.run.\n
        `out_dir (str)` - Destination folder, created when missing.\n
        `debug (bool)` - Also dump the 2D and final partitions.\n

    Return:
        `written (list)` - Paths of the files written. Nothing time or thread dependent is
        written, so two runs with the same scene, config and seed produce identical bytes.\n
    '''

    os.makedirs(out_dir, exist_ok=True)
    written = []

    config = result.config.to_dict() if result.config is not None else None
    classes = {
        'classes': [{'class_id': class_id, 'masks': [[ref.image_index, ref.local_id] for ref in refs]}
                    for class_id, refs in sorted(result.class_registry.items())],
        'config': config,
        'seed': config['seed'] if config else None,
        'stats': result.stats,
    }
    written.append(os.path.join(out_dir, 'classes.json'))
    _write_json(classes, written[-1])

    if config is not None:
        written.append(os.path.join(out_dir, 'config_echo.json'))
        _write_json(config, written[-1])

    for index, labels in sorted(result.label_maps.items()):
        written.append(os.path.join(out_dir, f"mhat_{index}.pgm"))
        write_labelmap(LabelMap(labels), written[-1])

    written.append(os.path.join(out_dir, 'cloud.ply'))
    write_cloud_ply(result.cloud, written[-1])

    if debug and result.partition_final is not None:
        written.append(os.path.join(out_dir, 'partition_debug.json'))
        _write_json({
            'vertices': [[ref.image_index, ref.local_id] for ref in result.mask_refs],
            'partition_2d': result.partition_2d.to_dict(),
            'partition_final': result.partition_final.to_dict(),
        }, written[-1])

    log_step("Write results", **{"Files written": written})

    return written


def read_result(out_dir: str) -> SegmentationResult:
    '''Rebuild a SegmentationResult from a directory written by write_result.'''

    classes = _read_json(os.path.join(out_dir, 'classes.json'))
    registry = {int(entry['class_id']): [MaskRef(int(i), int(m)) for i, m in entry['masks']]
                for entry in classes['classes']}
    config = PipelineConfig.from_dict(classes['config']) if classes.get('config') else None

    label_maps = {}
    for name in sorted(os.listdir(out_dir)):
        found = MHAT_PATTERN.match(name)
        if found:
            label_maps[int(found.group(1))] = read_labelmap(os.path.join(out_dir, name)).labels
    if not label_maps:
        raise SceneValidationError(f"{out_dir}: no mhat_<index>.pgm label maps")

    partition_2d = partition_final = None
    mask_refs = []
    debug_path = os.path.join(out_dir, 'partition_debug.json')
    if os.path.exists(debug_path):
        debug = _read_json(debug_path)
        mask_refs = [MaskRef(int(i), int(m)) for i, m in debug['vertices']]
        partition_2d = Partition.from_dict(debug['partition_2d'])
        partition_final = Partition.from_dict(debug['partition_final'])

    return SegmentationResult(class_registry=registry,
                              label_maps=label_maps,
                              cloud=read_cloud_ply(os.path.join(out_dir, 'cloud.ply')),
                              stats=classes.get('stats') or {},
                              config=config,
                              partition_2d=partition_2d,
                              partition_final=partition_final,
                              mask_refs=mask_refs)
