'''
Domain types shared by every stage: label maps, pointmaps, camera poses,
correspondences and the scene that ties them together.
'''

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numpy as np

from misc.errors import SceneValidationError

POSE_TOLERANCE = 1e-6


class MaskRef(NamedTuple):
    '''Vertex identity of one 2D mask: (image index, local label id).'''
    image_index: int
    local_id: int


@dataclass(frozen=True)
class CameraPose:
    '''Camera-to-world rigid transform, meters.'''
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    def validate(self) -> 'CameraPose':
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), rtol=0, atol=POSE_TOLERANCE):
            raise SceneValidationError("Camera rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > POSE_TOLERANCE:
            raise SceneValidationError("Camera rotation determinant is not +1")
        return self

    @classmethod
    def from_matrix(cls, values) -> 'CameraPose':
        '''Build a pose from 16 row-major floats of a 4x4 homogeneous matrix.'''
        matrix = np.asarray(values, dtype=np.float64)
        if matrix.size != 16:
            raise SceneValidationError(f"Pose needs 16 values, got {matrix.size}")
        matrix = matrix.reshape(4, 4)
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], rtol=0, atol=POSE_TOLERANCE):
            raise SceneValidationError("Pose bottom row must be [0, 0, 0, 1]")
        return cls(matrix[:3, :3], matrix[:3, 3]).validate()

    def to_matrix(self) -> list:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return [float(v) for v in matrix.ravel()]

    @property
    def position(self) -> np.ndarray:
        return self.translation


@dataclass(frozen=True)
class LabelMap:
    '''Row-major grid of unsigned 16-bit local mask ids; 0 means unassigned.'''
    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if labels.ndim != 2 or labels.size == 0:
            raise SceneValidationError(f"Label map must be a non-empty 2D grid, got shape {labels.shape}")
        object.__setattr__(self, 'labels', labels)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def mask_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids != 0]

    def areas(self) -> dict:
        '''Pixel area g(mask) for every nonzero id present.'''
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts) if i != 0}


@dataclass(frozen=True)
class PointMap:
    '''Per-pixel world coordinates (meters) and confidences in [0, 1].'''
    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points)
        if points.dtype not in (np.float32, np.float64):
            points = points.astype(np.float64)
        confidence = np.asarray(self.confidence, dtype=points.dtype)
        if points.ndim != 3 or points.shape[2] != 3:
            raise SceneValidationError(f"Pointmap must have shape (H, W, 3), got {points.shape}")
        if confidence.shape != points.shape[:2]:
            raise SceneValidationError("Pointmap confidence grid does not match the point grid")
        if np.isnan(confidence).any():
            raise SceneValidationError("Pointmap confidences must not be NaN")
        if confidence.size and (confidence.min() < 0 or confidence.max() > 1):
            raise SceneValidationError("Pointmap confidences must lie in [0, 1]")
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'confidence', confidence)

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def height(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PixelMatch:
    pixel_a: tuple
    pixel_b: tuple
    confidence: float


@dataclass(frozen=True)
class CorrespondenceSet:
    '''
    Matches between images `image_a` and `image_b`, stored column-wise: `pixels_a` and
    `pixels_b` are (n, 2) arrays of (x, y) and `confidence` is (n,).
    '''
    image_a: int
    image_b: int
    pixels_a: np.ndarray
    pixels_b: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        pixels_a = np.asarray(self.pixels_a, dtype=np.int64).reshape(-1, 2)
        pixels_b = np.asarray(self.pixels_b, dtype=np.int64).reshape(-1, 2)
        confidence = np.asarray(self.confidence, dtype=np.float32).reshape(-1)
        if not len(pixels_a) == len(pixels_b) == len(confidence):
            raise SceneValidationError("Correspondence columns have different lengths")
        object.__setattr__(self, 'pixels_a', pixels_a)
        object.__setattr__(self, 'pixels_b', pixels_b)
        object.__setattr__(self, 'confidence', confidence)

    def __len__(self) -> int:
        return len(self.confidence)

    def matches(self) -> Iterator[PixelMatch]:
        for pa, pb, conf in zip(self.pixels_a, self.pixels_b, self.confidence):
            yield PixelMatch((int(pa[0]), int(pa[1])), (int(pb[0]), int(pb[1])), float(conf))

    def select(self, keep: np.ndarray) -> 'CorrespondenceSet':
        '''Subset by boolean mask or index array, keeping the original order.'''
        return CorrespondenceSet(self.image_a, self.image_b,
                                 self.pixels_a[keep], self.pixels_b[keep], self.confidence[keep])

    @classmethod
    def empty(cls, image_a: int, image_b: int) -> 'CorrespondenceSet':
        return cls(image_a, image_b, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))


@dataclass(frozen=True)
class ImageMeta:
    index: int
    pose: CameraPose
    label_map: LabelMap
    point_map: PointMap
    labelmap_path: Optional[str] = None
    pointmap_path: Optional[str] = None

    @property
    def width(self) -> int:
        return self.label_map.width

    @property
    def height(self) -> int:
        return self.label_map.height


@dataclass(frozen=True)
class Scene:
    images: list
    correspondences: list = field(default_factory=list)
    ground_truth: Optional[dict] = None
    background: Optional[dict] = None

    def validate(self) -> 'Scene':
        '''
        Cross-check every reference inside the scene. Raises SceneValidationError on the
        first problem found.
        '''

        if not self.images:
            raise SceneValidationError("empty scene")

        seen = set()
        for image in self.images:
            if image.index < 0:
                raise SceneValidationError(f"Negative image index {image.index}")
            if image.index in seen:
                raise SceneValidationError(f"Duplicate image index {image.index}")
            seen.add(image.index)
            if image.width * image.height <= 0:
                raise SceneValidationError(f"Image {image.index} has no pixels")
            if (image.point_map.width, image.point_map.height) != (image.width, image.height):
                raise SceneValidationError(
                    f"Image {image.index}: label map is {image.width}x{image.height} "
                    f"but pointmap is {image.point_map.width}x{image.point_map.height}")
            image.pose.validate()

        sizes = {image.index: (image.width, image.height) for image in self.images}
        for corr in self.correspondences:
            for index in (corr.image_a, corr.image_b):
                if index not in sizes:
                    raise SceneValidationError(f"Correspondence references unknown image {index}")
            for index, pixels in ((corr.image_a, corr.pixels_a), (corr.image_b, corr.pixels_b)):
                width, height = sizes[index]
                if len(pixels) and (pixels.min() < 0 or pixels[:, 0].max() >= width or pixels[:, 1].max() >= height):
                    raise SceneValidationError(
                        f"Correspondence {corr.image_a}-{corr.image_b} has pixels outside image {index}")

        for name, maps in (('ground truth', self.ground_truth), ('background', self.background)):
            for index, label_map in (maps or {}).items():
                if index not in sizes:
                    raise SceneValidationError(f"{name} map references unknown image {index}")
                if (label_map.width, label_map.height) != sizes[index]:
                    raise SceneValidationError(f"{name} map for image {index} does not match the image size")

        return self

    def image(self, image_index: int) -> ImageMeta:
        for image in self.images:
            if image.index == image_index:
                return image
        raise SceneValidationError(f"Unknown image index {image_index}")

    @property
    def poses(self) -> list:
        return [image.pose for image in self.images]


class MaskIndex:
    '''
    Bijection between MaskRefs and the opaque integer vertex ids used by the graphs.
    Ids follow ascending (image index, local id) order, so the minimum vertex id of a
    group is also its minimum MaskRef.
    '''

    def __init__(self, refs):
        self.refs = sorted(set(MaskRef(int(i), int(m)) for i, m in refs))
        self._ids = {ref: vertex for vertex, ref in enumerate(self.refs)}

    def __len__(self) -> int:
        return len(self.refs)

    def __contains__(self, ref) -> bool:
        return MaskRef(*ref) in self._ids

    def vertex(self, ref) -> int:
        return self._ids[MaskRef(*ref)]

    def ref(self, vertex: int) -> MaskRef:
        return self.refs[vertex]

    @property
    def vertices(self) -> np.ndarray:
        return np.arange(len(self.refs), dtype=np.int64)

    @classmethod
    def from_label_maps(cls, label_maps: dict) -> 'MaskIndex':
        return cls((index, local_id) for index, labels in label_maps.items()
                   for local_id in np.unique(labels) if local_id != 0)


def mask_pixels(label_map: LabelMap, local_id: int) -> set:
    '''
    Pixels (x, y) of one mask. The size of the result is the mask area g(mask);
    an id that does not occur gives an empty set.
    '''

    ys, xs = np.nonzero(label_map.labels == local_id)
    return {(int(x), int(y)) for x, y in zip(xs, ys)}


def pixel_to_point(scene: Scene, image_index: int, pixel: tuple) -> 'tuple[np.ndarray, float]':
    '''
    Look up the pointmap entry of one pixel. Confidence is returned as stored; filtering
    is left to the caller.\n

    Parameters:
        `scene (Scene)` - Loaded scene.\n
        `image_index (int)` - Index of the image the pixel belongs to.\n
        `pixel (tuple)` - (x, y) pixel coordinates.\n

    Return:
        `point (np.ndarray)` - 3-vector in the world frame.\n
        `confidence (float)` - Pointmap confidence of that pixel.\n
    '''

    point_map = scene.image(image_index).point_map
    x, y = pixel
    if not (0 <= x < point_map.width and 0 <= y < point_map.height):
        raise SceneValidationError(
            f"Pixel {pixel} is outside image {image_index} ({point_map.width}x{point_map.height})")

    return point_map.points[y, x].copy(), float(point_map.confidence[y, x])


def first_views(scene: Scene, n_views: int) -> Scene:
    '''
    Keep the first `n_views` images of a scene (manifest order) together with the
    correspondences, ground truth and background maps that only involve them.
    '''

    if n_views < 1:
        raise SceneValidationError(f"At least one view is required, got {n_views}")

    images = scene.images[:n_views]
    kept = {image.index for image in images}
    restrict = lambda maps: {index: value for index, value in maps.items() if index in kept} if maps else maps

    return Scene(images=images,
                 correspondences=[c for c in scene.correspondences if c.image_a in kept and c.image_b in kept],
                 ground_truth=restrict(scene.ground_truth),
                 background=restrict(scene.background))
