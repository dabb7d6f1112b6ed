'''
Readers and writers for the interchange formats:

    label maps        16-bit binary PGM (P5, maxval 65535, big-endian samples)
    pointmaps         "PMAP1", u32 width, u32 height, H*W*3 float32 points, H*W float32 confidences
    correspondences   "CORR1", u32 a, u32 b, u32 count, count x (u16 xa, u16 ya, u16 xb, u16 yb, f32 conf)
    manifest          one JSON document with image entries, poses and relative file paths
    clouds            binary little-endian PLY

Every writer followed by the matching reader gives back the same data bit for bit.
'''

import json
import os
import struct

import numpy as np
import pandas as pd
from plyfile import PlyData, PlyElement

from misc.errors import SceneFormatError, SceneValidationError
from misc.log_utils import log_warning
from scene.scene_model import CameraPose, CorrespondenceSet, ImageMeta, LabelMap, PointMap, Scene

PMAP_MAGIC = b'PMAP1'
CORR_MAGIC = b'CORR1'
CORR_RECORD = np.dtype([('xa', '<u2'), ('ya', '<u2'), ('xb', '<u2'), ('yb', '<u2'), ('conf', '<f4')])
PLY_VERTEX = np.dtype([('x', '<f4'), ('y', '<f4'), ('z', '<f4'),
                       ('red', 'u1'), ('green', 'u1'), ('blue', 'u1'),
                       ('class_id', '<u2'), ('source_image', '<u2')])

# Class colors for cloud.ply, indexed by class id mod 32. Entry 0 is the background gray.
PALETTE = np.array([
    (128, 128, 128), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128),
    (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195), (128, 128, 0),
    (255, 215, 180), (0, 0, 128), (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (188, 189, 34), (23, 190, 207), (174, 199, 232),
    (255, 152, 150), (197, 176, 213),
], dtype=np.uint8)


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise SceneValidationError(f"Missing file: {path}")
    with open(path, 'rb') as binary_file:
        return binary_file.read()


def _write_bytes(path: str, payload: bytes) -> None:
    with open(path, 'wb') as binary_file:
        binary_file.write(payload)


def _pgm_header_tokens(data: bytes, path: str) -> 'tuple[list, int]':

    # Header tokens are separated by whitespace; '#' starts a comment running to end of line
    position = 2
    tokens = []
    while len(tokens) < 3:
        while position < len(data) and data[position:position + 1].isspace():
            position += 1
        if data[position:position + 1] == b'#':
            while position < len(data) and data[position:position + 1] not in (b'\n', b'\r'):
                position += 1
            continue
        start = position
        while position < len(data) and not data[position:position + 1].isspace() and data[position:position + 1] != b'#':
            position += 1
        if start == position:
            raise SceneFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:position])

    # Exactly one whitespace byte separates maxval from the samples
    if position >= len(data):
        raise SceneFormatError(f"{path}: truncated payload")

    return tokens, position + 1


def read_labelmap(path: str) -> LabelMap:
    '''
    Read a 16-bit binary PGM label map.\n

    Parameters:
        `path (str)` - Location of the .pgm file.\n

    Return:
        `label_map (LabelMap)` - Decoded label grid.\n
    '''

    data = _read_bytes(path)
    if data[:2] != b'P5':
        raise SceneFormatError(f"{path}: bad magic {data[:2]!r}, expected binary PGM (P5)")

    tokens, offset = _pgm_header_tokens(data, path)
    try:
        width, height, maxval = (int(token) for token in tokens)
    except ValueError:
        raise SceneFormatError(f"{path}: non-numeric PGM header")

    if maxval < 256:
        raise SceneFormatError(f"{path}: 8-bit label maps unsupported")
    if maxval != 65535:
        raise SceneFormatError(f"{path}: maxval must be 65535, got {maxval}")
    if width <= 0 or height <= 0:
        raise SceneFormatError(f"{path}: empty image {width}x{height}")

    payload = data[offset:offset + 2 * width * height]
    if len(payload) < 2 * width * height:
        raise SceneFormatError(f"{path}: truncated payload ({len(payload)} of {2 * width * height} bytes)")

    labels = np.frombuffer(payload, dtype='>u2').reshape(height, width).astype(np.uint16)
    return LabelMap(labels)


def write_labelmap(label_map: LabelMap, path: str) -> None:
    header = f"P5\n{label_map.width} {label_map.height}\n65535\n".encode('ascii')
    _write_bytes(path, header + label_map.labels.astype('>u2').tobytes())


def read_pointmap(path: str) -> PointMap:

    data = _read_bytes(path)
    if data[:5] != PMAP_MAGIC:
        raise SceneFormatError(f"{path}: bad magic {data[:5]!r}, expected {PMAP_MAGIC!r}")
    if len(data) < 13:
        raise SceneFormatError(f"{path}: truncated header")

    width, height = struct.unpack('<II', data[5:13])
    n_pixels = width * height
    expected = 13 + 16 * n_pixels
    if len(data) < expected:
        raise SceneFormatError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")

    points = np.frombuffer(data, dtype='<f4', count=3 * n_pixels, offset=13).reshape(height, width, 3)
    confidence = np.frombuffer(data, dtype='<f4', count=n_pixels, offset=13 + 12 * n_pixels).reshape(height, width)

    return PointMap(points.astype(np.float32), confidence.astype(np.float32))


def write_pointmap(point_map: PointMap, path: str) -> None:
    header = PMAP_MAGIC + struct.pack('<II', point_map.width, point_map.height)
    _write_bytes(path, header
                 + point_map.points.astype('<f4').tobytes()
                 + point_map.confidence.astype('<f4').tobytes())


def read_correspondences(path: str) -> CorrespondenceSet:

    data = _read_bytes(path)
    if data[:5] != CORR_MAGIC:
        raise SceneFormatError(f"{path}: bad magic {data[:5]!r}, expected {CORR_MAGIC!r}")
    if len(data) < 17:
        raise SceneFormatError(f"{path}: truncated header")

    image_a, image_b, count = struct.unpack('<III', data[5:17])
    expected = 17 + count * CORR_RECORD.itemsize
    if len(data) < expected:
        raise SceneFormatError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")

    records = np.frombuffer(data, dtype=CORR_RECORD, count=count, offset=17)
    pixels_a = np.stack([records['xa'], records['ya']], axis=1)
    pixels_b = np.stack([records['xb'], records['yb']], axis=1)

    return CorrespondenceSet(int(image_a), int(image_b), pixels_a, pixels_b, records['conf'])


def write_correspondences(correspondences: CorrespondenceSet, path: str) -> None:

    records = np.empty(len(correspondences), dtype=CORR_RECORD)
    records['xa'] = correspondences.pixels_a[:, 0]
    records['ya'] = correspondences.pixels_a[:, 1]
    records['xb'] = correspondences.pixels_b[:, 0]
    records['yb'] = correspondences.pixels_b[:, 1]
    records['conf'] = correspondences.confidence

    header = CORR_MAGIC + struct.pack('<III', correspondences.image_a, correspondences.image_b, len(correspondences))
    _write_bytes(path, header + records.tobytes())


def _aligned_paths(raw, images: list, key: str) -> dict:

    # Accept either a list aligned with "images" or a mapping keyed by image index
    if raw is None:
        return {}
    if isinstance(raw, dict):
        return {int(index): path for index, path in raw.items()}
    if len(raw) != len(images):
        raise SceneValidationError(f"Manifest '{key}' has {len(raw)} entries for {len(images)} images")
    return {int(entry['index']): path for entry, path in zip(images, raw)}


def load_scene(manifest_path: str) -> Scene:
    '''
    Load a scene manifest and every file it references, then cross-validate the result.\n

    Parameters:
        `manifest_path (str)` - Path of the manifest JSON. Relative paths inside it are resolved
        against the manifest's folder.\n

    Return:
        `scene (Scene)` - Fully resolved, validated scene.\n
    '''

    if not os.path.exists(manifest_path):
        raise SceneValidationError(f"Missing file: {manifest_path}")

    with open(manifest_path, 'r', encoding='utf-8') as manifest_file:
        try:
            manifest = json.load(manifest_file)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{manifest_path}: invalid JSON ({e})")

    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    resolve = lambda relative: os.path.join(base_dir, relative)

    entries = manifest.get('images') or []
    if not entries:
        raise SceneValidationError("empty scene")

    images = []
    seen = set()
    for entry in entries:
        try:
            index = int(entry['index'])
            labelmap_path, pointmap_path, pose_values = entry['labelmap'], entry['pointmap'], entry['pose']
        except KeyError as e:
            raise SceneFormatError(f"{manifest_path}: image entry is missing {e}")
        if index in seen:
            raise SceneValidationError(f"Duplicate image index {index}")
        seen.add(index)

        images.append(ImageMeta(index=index,
                                pose=CameraPose.from_matrix(pose_values),
                                label_map=read_labelmap(resolve(labelmap_path)),
                                point_map=read_pointmap(resolve(pointmap_path)),
                                labelmap_path=labelmap_path,
                                pointmap_path=pointmap_path))

    correspondences = []
    for relative in manifest.get('correspondences') or []:
        corr = read_correspondences(resolve(relative))
        if corr.image_a == corr.image_b:
            log_warning(f"{relative}: correspondences within image {corr.image_a} ignored")
            continue
        if corr.image_a > corr.image_b:
            corr = CorrespondenceSet(corr.image_b, corr.image_a, corr.pixels_b, corr.pixels_a, corr.confidence)
        correspondences.append(corr)

    ground_truth = {index: read_labelmap(resolve(path))
                    for index, path in _aligned_paths(manifest.get('ground_truth'), entries, 'ground_truth').items()}
    background = {index: read_labelmap(resolve(path))
                  for index, path in _aligned_paths(manifest.get('background'), entries, 'background').items()}

    return Scene(images=images,
                 correspondences=correspondences,
                 ground_truth=ground_truth or None,
                 background=background or None).validate()


def write_scene(scene: Scene, directory: str, manifest_name: str = 'manifest.json') -> str:
    '''
    Write a scene in the interchange formats with canonical file names and return the
    manifest path. Writing a scene that was loaded from such a directory reproduces it
    byte for byte.
    '''

    os.makedirs(directory, exist_ok=True)

    manifest = {'images': [], 'correspondences': []}
    for image in scene.images:
        labelmap_name = f"labelmap_{image.index}.pgm"
        pointmap_name = f"pointmap_{image.index}.pmap"
        write_labelmap(image.label_map, os.path.join(directory, labelmap_name))
        write_pointmap(image.point_map, os.path.join(directory, pointmap_name))
        manifest['images'].append({
            'index': image.index,
            'labelmap': labelmap_name,
            'pointmap': pointmap_name,
            'pose': image.pose.to_matrix(),
        })

    for corr in sorted(scene.correspondences, key=lambda c: (c.image_a, c.image_b)):
        corr_name = f"corr_{corr.image_a}_{corr.image_b}.corr"
        write_correspondences(corr, os.path.join(directory, corr_name))
        manifest['correspondences'].append(corr_name)

    for key, prefix, maps in (('ground_truth', 'gt', scene.ground_truth), ('background', 'background', scene.background)):
        if not maps:
            continue
        names = {}
        for index in sorted(maps):
            names[str(index)] = f"{prefix}_{index}.pgm"
            write_labelmap(maps[index], os.path.join(directory, names[str(index)]))
        # Maps covering every image keep the list form aligned with "images"
        covers_all = sorted(maps) == sorted(image.index for image in scene.images)
        manifest[key] = [names[str(image.index)] for image in scene.images] if covers_all else names

    manifest_path = os.path.join(directory, manifest_name)
    with open(manifest_path, 'w', encoding='utf-8') as manifest_file:
        json.dump(manifest, manifest_file, indent=2)
        manifest_file.write('\n')

    return manifest_path


def write_cloud_ply(cloud: pd.DataFrame, path: str) -> None:
    '''
    Write a labeled cloud (columns x, y, z, class_id, source_image) as binary little-endian
    PLY, colored from the fixed palette by class id.
    '''

    vertex = np.empty(len(cloud), dtype=PLY_VERTEX)
    for axis in ('x', 'y', 'z'):
        vertex[axis] = cloud[axis].to_numpy(dtype=np.float32)
    class_ids = cloud['class_id'].to_numpy(dtype=np.int64)
    colors = PALETTE[class_ids % len(PALETTE)]
    vertex['red'], vertex['green'], vertex['blue'] = colors[:, 0], colors[:, 1], colors[:, 2]
    vertex['class_id'] = class_ids
    vertex['source_image'] = cloud['source_image'].to_numpy(dtype=np.int64)

    PlyData([PlyElement.describe(vertex, 'vertex')], text=False, byte_order='<').write(path)


def read_cloud_ply(path: str) -> pd.DataFrame:

    if not os.path.exists(path):
        raise SceneValidationError(f"Missing file: {path}")

    vertex = PlyData.read(path)['vertex'].data
    return pd.DataFrame({
        'x': vertex['x'].astype(np.float32),
        'y': vertex['y'].astype(np.float32),
        'z': vertex['z'].astype(np.float32),
        'class_id': vertex['class_id'].astype(np.int64),
        'source_image': vertex['source_image'].astype(np.int64),
    })
