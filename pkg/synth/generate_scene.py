'''
Synthetic tabletop scenes with exact ground truth: boxes and spheres on a table, seen by a
ring of pinhole cameras and rendered by analytic ray casting.
'''

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from misc.errors import SynthSpecError
from misc.log_utils import log_step, log_warning
from misc.parse_config import PipelineConfig
from scene.formats import write_scene
from scene.scene_model import CameraPose, CorrespondenceSet, ImageMeta, LabelMap, PointMap, Scene
from transform.match2d import select_image_pairs

MISS = np.inf


@dataclass(frozen=True)
class SynthSpec:
    n_objects: int = 5
    n_views: int = 6
    width: int = 640
    height: int = 480
    fov_deg: float = 60.0

    # Primitive sizes, meters
    box_size: tuple = (0.03, 0.06)
    sphere_radius: tuple = (0.015, 0.03)
    sphere_fraction: float = 0.4

    table_width: float = 1.0
    table_depth: float = 1.0
    placement_radius: float = 0.2
    min_gap: float = 0.05

    ring_radius: float = 0.8
    ring_height: float = 0.5

    overseg_k: int = 1
    match_dropout: float = 0.0
    spurious_rate: float = 0.0
    pointmap_noise_sigma: float = 0.0
    match_stride: int = 2
    far_distance: float = 10.0

    seed: int = 0
    max_placement_tries: int = 1000

    def validate(self) -> 'SynthSpec':

        if self.n_objects < 1:
            raise SynthSpecError(f"n_objects must be at least 1, got {self.n_objects}")
        if self.n_views < 1:
            raise SynthSpecError(f"n_views must be at least 1, got {self.n_views}")
        if self.overseg_k < 1:
            raise SynthSpecError(f"overseg_k must be at least 1, got {self.overseg_k}")
        if self.width < 1 or self.height < 1:
            raise SynthSpecError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0 < self.fov_deg < 180:
            raise SynthSpecError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        for name in ('match_dropout', 'spurious_rate', 'sphere_fraction'):
            if not 0 <= getattr(self, name) <= 1:
                raise SynthSpecError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.pointmap_noise_sigma < 0:
            raise SynthSpecError(f"pointmap_noise_sigma must be non-negative, got {self.pointmap_noise_sigma}")
        if self.match_stride < 1:
            raise SynthSpecError(f"match_stride must be at least 1, got {self.match_stride}")
        if self.seed < 0:
            raise SynthSpecError(f"seed must be non-negative, got {self.seed}")
        if self.box_size[0] <= 0 or self.box_size[0] > self.box_size[1]:
            raise SynthSpecError(f"box_size must be an increasing positive range, got {self.box_size}")
        if self.sphere_radius[0] <= 0 or self.sphere_radius[0] > self.sphere_radius[1]:
            raise SynthSpecError(f"sphere_radius must be an increasing positive range, got {self.sphere_radius}")

        return self

    def to_dict(self) -> dict:
        values = asdict(self)
        values['box_size'] = list(self.box_size)
        values['sphere_radius'] = list(self.sphere_radius)
        return values


@dataclass(frozen=True)
class Box:
    center: tuple
    half_size: tuple

    @property
    def footprint(self) -> float:
        return float(np.hypot(self.half_size[0], self.half_size[1]))

    def intersect(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        '''Distance along each ray to the entry point, inf on a miss. Slab method.'''

        lower = np.asarray(self.center) - np.asarray(self.half_size)
        upper = np.asarray(self.center) + np.asarray(self.half_size)
        with np.errstate(divide='ignore', invalid='ignore'):
            inverse = 1.0 / directions
            t1 = (lower - origin) * inverse
            t2 = (upper - origin) * inverse
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)

        hit = (t_far >= t_near) & (t_near > 0)
        return np.where(hit, t_near, MISS)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    @property
    def footprint(self) -> float:
        return self.radius

    def intersect(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:

        offset = origin - np.asarray(self.center)
        b = directions @ offset
        c = offset @ offset - self.radius ** 2
        discriminant = b * b - c
        with np.errstate(invalid='ignore'):
            t = -b - np.sqrt(discriminant)
        return np.where((discriminant >= 0) & (t > 0), t, MISS)


def focal_length(spec: SynthSpec) -> float:
    return (spec.width / 2.0) / np.tan(np.radians(spec.fov_deg) / 2.0)


def ring_poses(spec: SynthSpec) -> list:
    '''
    Cameras evenly spaced on a ring, all looking at the table center. Camera axes follow the
    usual computer vision convention: x right, y down, z forward.
    '''

    poses = []
    for view in range(spec.n_views):
        angle = 2 * np.pi * view / spec.n_views
        position = np.array([spec.ring_radius * np.cos(angle), spec.ring_radius * np.sin(angle), spec.ring_height])
        forward = -position / np.linalg.norm(position)
        right = np.cross(forward, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        poses.append(CameraPose(np.column_stack([right, down, forward]), position))

    return poses


def place_primitives(spec: SynthSpec, rng: np.random.Generator) -> list:
    '''
    Drop `n_objects` primitives on the table so that their footprint circles stay at least
    `min_gap` apart. Raises SynthSpecError when a primitive cannot be placed.
    '''

    placed = []
    for object_number in range(spec.n_objects):
        for _ in range(spec.max_placement_tries):
            radius = spec.placement_radius * np.sqrt(rng.random())
            angle = rng.uniform(0, 2 * np.pi)
            x, y = radius * np.cos(angle), radius * np.sin(angle)

            if rng.random() < spec.sphere_fraction:
                size = rng.uniform(*spec.sphere_radius)
                candidate = Sphere((x, y, size), size)
            else:
                half = rng.uniform(*spec.box_size, size=3) / 2.0
                candidate = Box((x, y, half[2]), tuple(half))

            inside_table = (abs(x) + candidate.footprint <= spec.table_width / 2
                            and abs(y) + candidate.footprint <= spec.table_depth / 2)
            clear = all(np.hypot(x - other.center[0], y - other.center[1])
                        >= candidate.footprint + other.footprint + spec.min_gap for other in placed)
            if inside_table and clear:
                placed.append(candidate)
                break
        else:
            raise SynthSpecError(f"could not place object {object_number + 1} of {spec.n_objects} "
                                 f"after {spec.max_placement_tries} tries")

    return placed


def _pixel_rays(spec: SynthSpec, pose: CameraPose) -> np.ndarray:

    f = focal_length(spec)
    xs, ys = np.meshgrid(np.arange(spec.width), np.arange(spec.height))
    camera = np.stack([(xs + 0.5 - spec.width / 2.0) / f,
                       (ys + 0.5 - spec.height / 2.0) / f,
                       np.ones_like(xs, dtype=np.float64)], axis=2).reshape(-1, 3)
    camera /= np.linalg.norm(camera, axis=1, keepdims=True)

    return camera @ pose.rotation.T


def render_view(spec: SynthSpec, pose: CameraPose, primitives: list) -> dict:
    '''
    Ray cast one view.\n

    Parameters:
        `spec (SynthSpec)` - Image size, field of view, table extent and far distance.\n
        `pose (CameraPose)` - Camera-to-world pose.\n
        `primitives (list)` - Placed Box and Sphere objects; object id = position + 1.\n

    Return:
        `view (dict)` - `objects` (H, W) uint16 object ids (0 off-object), `table` (H, W) bool,
        `points` (H, W, 3) float64 hit points and `confidence` (H, W) ones. Rays hitting
        nothing get a point `far_distance` along the ray.\n
    '''

    origin = pose.position
    directions = _pixel_rays(spec, pose)
    n_rays = len(directions)

    depth = np.full(n_rays, MISS)
    owner = np.zeros(n_rays, dtype=np.uint16)
    for object_id, primitive in enumerate(primitives, start=1):
        t = primitive.intersect(origin, directions)
        closer = t < depth
        depth[closer] = t[closer]
        owner[closer] = object_id

    # Table top is the plane z = 0 inside its extent
    with np.errstate(divide='ignore', invalid='ignore'):
        t_table = np.where(directions[:, 2] < 0, -origin[2] / directions[:, 2], MISS)
    hit_table = origin[:2] + t_table[:, None] * directions[:, :2]
    on_table = ((np.abs(hit_table[:, 0]) <= spec.table_width / 2)
                & (np.abs(hit_table[:, 1]) <= spec.table_depth / 2) & np.isfinite(t_table))
    table = on_table & (t_table < depth)
    depth = np.where(table, t_table, depth)
    owner[table] = 0

    depth = np.where(np.isfinite(depth), depth, spec.far_distance)
    points = origin + depth[:, None] * directions

    shape = (spec.height, spec.width)
    return {'objects': owner.reshape(shape),
            'table': table.reshape(shape),
            'points': points.reshape(shape + (3,)),
            'confidence': np.ones(shape)}


def _proposal_map(view: dict, rng: np.random.Generator) -> 'tuple[np.ndarray, int]':

    # Local ids are a per-view shuffle so ids never line up across views by accident
    present = [int(i) for i in np.unique(view['objects']) if i != 0]
    segments = [view['objects'] == object_id for object_id in present]
    if view['table'].any():
        segments.append(view['table'])

    local_ids = rng.permutation(len(segments)) + 1
    labels = np.zeros(view['objects'].shape, dtype=np.uint16)
    for local_id, segment in zip(local_ids, segments):
        labels[segment] = local_id

    table_id = int(local_ids[-1]) if view['table'].any() else 0
    return labels, table_id


def generate(spec: SynthSpec, threads: int = 1) -> 'tuple[Scene, dict]':
    '''
    Build a scene with one full-object mask per visible object and view plus a table mask.\n

    Parameters:
        `spec (SynthSpec)` - Scene description; only the geometric fields are used here.\n
        `threads (int)` - Views rendered in parallel; output does not depend on it.\n

    Return:
        `scene (Scene)` - Images with exact pointmaps (confidence 1.0), ground-truth and table
        background maps, no correspondences.\n
        `ground_truth (dict)` - Image index to LabelMap of object ids (0 = table or nothing).\n
    '''

    spec.validate()
    primitives = place_primitives(spec, np.random.default_rng(spec.seed))
    poses = ring_poses(spec)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        views = list(executor.map(lambda pose: render_view(spec, pose, primitives), poses))

    images, ground_truth, background = [], {}, {}
    for index, (pose, view) in enumerate(zip(poses, views)):
        labels, _ = _proposal_map(view, np.random.default_rng([spec.seed, index, 1]))
        images.append(ImageMeta(index=index,
                                pose=pose,
                                label_map=LabelMap(labels),
                                point_map=PointMap(view['points'], view['confidence'])))
        ground_truth[index] = LabelMap(view['objects'])
        background[index] = LabelMap(view['table'].astype(np.uint16))

    scene = Scene(images=images, ground_truth=ground_truth, background=background).validate()

    log_step("Synthetic scene",
             **{"Objects": primitives,
                "Views": images,
                "Masks": sum(len(image.label_map.mask_ids()) for image in images)})

    return scene, ground_truth


def inject_oversegmentation(label_maps: dict, overseg_k: int, seed: int, keep_whole: Optional[dict] = None) -> dict:
    '''
    Split masks into fragments with parallel planar cuts.\n

    Parameters:
        `label_maps (dict)` - Image index to label grid (array or LabelMap).\n
        `overseg_k (int)` - Every mask is cut into a random number of fragments in 1..overseg_k.\n
        `seed (int)` - Root seed; each image draws from its own stream.\n
        `keep_whole (dict)` - Optional image index to local ids that are never cut.\n

    Return:
        `fragmented (dict)` - Image index to uint16 label grid with fragments renumbered
        1..n in order of their source mask. The union of a mask's fragments is the mask.\n
    '''

    if overseg_k < 1:
        raise SynthSpecError(f"overseg_k must be at least 1, got {overseg_k}")

    grids = {index: np.asarray(getattr(labels, 'labels', labels)) for index, labels in label_maps.items()}
    if overseg_k == 1:
        return {index: grid.astype(np.uint16).copy() for index, grid in grids.items()}

    fragmented = {}
    for index in sorted(grids):
        grid = grids[index]
        rng = np.random.default_rng([seed, index, 2])
        protected = set((keep_whole or {}).get(index, ()))
        output = np.zeros(grid.shape, dtype=np.uint16)
        next_id = 1

        for local_id in (int(i) for i in np.unique(grid) if i != 0):
            ys, xs = np.nonzero(grid == local_id)
            n_fragments = int(rng.integers(1, overseg_k + 1))
            direction = rng.uniform(0, np.pi)
            if local_id in protected or n_fragments == 1 or len(xs) < n_fragments:
                output[ys, xs] = next_id
                next_id += 1
                continue

            projection = xs * np.cos(direction) + ys * np.sin(direction)
            for part in np.array_split(np.argsort(projection, kind='stable'), n_fragments):
                output[ys[part], xs[part]] = next_id
                next_id += 1

        if next_id > 65535:
            raise SynthSpecError(f"image {index}: {next_id - 1} fragments do not fit a 16-bit label map")
        fragmented[index] = output

    return fragmented


def _exact_matches(scene: Scene, gt: dict, index_a: int, index_b: int, stride: int, f: float) -> CorrespondenceSet:

    image_a, image_b = scene.image(index_a), scene.image(index_b)
    objects_a = gt[index_a].labels
    objects_b = gt[index_b].labels

    ys, xs = np.mgrid[0:image_a.height:stride, 0:image_a.width:stride]
    ys, xs = ys.ravel(), xs.ravel()
    on_object = objects_a[ys, xs] != 0
    ys, xs = ys[on_object], xs[on_object]

    points = image_a.point_map.points[ys, xs].astype(np.float64)
    camera = (points - image_b.pose.position) @ image_b.pose.rotation
    with np.errstate(divide='ignore', invalid='ignore'):
        u = np.floor(f * camera[:, 0] / camera[:, 2] + image_b.width / 2.0)
        v = np.floor(f * camera[:, 1] / camera[:, 2] + image_b.height / 2.0)
    visible = (camera[:, 2] > 0) & (u >= 0) & (u < image_b.width) & (v >= 0) & (v < image_b.height)

    ys, xs, points, depth = ys[visible], xs[visible], points[visible], camera[visible, 2]
    ub, vb = u[visible].astype(np.int64), v[visible].astype(np.int64)

    # A pixel of view b matches when it sees the same surface point, up to its own footprint
    seen = image_b.point_map.points[vb, ub].astype(np.float64)
    same_point = np.linalg.norm(seen - points, axis=1) <= 2.0 * depth / f
    same_object = objects_b[vb, ub] == objects_a[ys, xs]
    keep = same_point & same_object

    return CorrespondenceSet(index_a, index_b,
                             np.stack([xs[keep], ys[keep]], axis=1),
                             np.stack([ub[keep], vb[keep]], axis=1),
                             np.ones(int(keep.sum()), dtype=np.float32))


def _spurious_matches(gt: dict, index_a: int, index_b: int, count: int, rng: np.random.Generator,
                      max_rounds: int = 100) -> CorrespondenceSet:

    objects_a, objects_b = gt[index_a].labels, gt[index_b].labels
    ya, xa = np.nonzero(objects_a)
    if count == 0 or len(xa) == 0:
        return CorrespondenceSet.empty(index_a, index_b)

    height_b, width_b = objects_b.shape
    picked_a, picked_b = [], []
    found = 0
    for _ in range(max_rounds):
        pick_a = rng.integers(0, len(xa), size=count)
        bx = rng.integers(0, width_b, size=count)
        by = rng.integers(0, height_b, size=count)
        wrong = objects_b[by, bx] != objects_a[ya[pick_a], xa[pick_a]]
        picked_a.append(np.stack([xa[pick_a][wrong], ya[pick_a][wrong]], axis=1))
        picked_b.append(np.stack([bx[wrong], by[wrong]], axis=1))
        found += int(wrong.sum())
        if found >= count:
            break
    else:
        log_warning(f"only {found} of {count} spurious matches found for images {index_a}-{index_b}")

    pixels_a = np.concatenate(picked_a)[:count]
    pixels_b = np.concatenate(picked_b)[:count]
    confidence = rng.uniform(0.5, 1.0, size=len(pixels_a)).astype(np.float32)

    return CorrespondenceSet(index_a, index_b, pixels_a, pixels_b, confidence)


def generate_matches(scene: Scene,
                     gt: dict,
                     dropout: float,
                     spurious_rate: float,
                     seed: int,
                     stride: int = 2,
                     fov_deg: float = 60.0,
                     pairs: Optional[list] = None) -> list:
    '''
    Ground-truth correspondences between views, with optional dropout and wrong matches.\n

    Parameters:
        `scene (Scene)` - Rendered scene; its poses and pointmaps define the true matches.\n
        `gt (dict)` - Image index to ground-truth object LabelMap.\n
        `dropout (float)` - Fraction of the true matches removed, floor(dropout * n).\n
        `spurious_rate (float)` - floor(spurious_rate * n) wrong pairs linking different objects are added, with
        confidences drawn from [0.5, 1].\n
        `seed (int)` - Root seed; each image pair draws from its own stream.\n
        `stride (int)` - Object pixels of the first view are sampled on a grid with this step.\n
        `fov_deg (float)` - Horizontal field of view used to render the scene.\n
        `pairs (list)` - Image index pairs; defaults to the pairs the pipeline would select.\n

    Return:
        `correspondences (list)` - One CorrespondenceSet per pair, true matches first.\n
    '''

    for name, rate in (('dropout', dropout), ('spurious_rate', spurious_rate)):
        if not 0 <= rate <= 1:
            raise SynthSpecError(f"{name} must be in [0, 1], got {rate}")

    first = scene.images[0]
    f = (first.width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    if pairs is None:
        pairs = select_image_pairs(scene, PipelineConfig())

    correspondences = []
    for index_a, index_b in pairs:
        exact = _exact_matches(scene, gt, index_a, index_b, stride, f)
        rng = np.random.default_rng([seed, index_a, index_b, 3])

        n_exact = len(exact)
        n_drop = int(np.floor(dropout * n_exact))
        kept = exact
        if n_drop:
            removed = rng.choice(n_exact, size=n_drop, replace=False)
            kept = exact.select(np.setdiff1d(np.arange(n_exact), removed))

        n_spurious = int(np.floor(spurious_rate * n_exact + 1e-9))
        wrong = _spurious_matches(gt, index_a, index_b, n_spurious, rng)

        correspondences.append(CorrespondenceSet(
            index_a, index_b,
            np.concatenate([kept.pixels_a, wrong.pixels_a]),
            np.concatenate([kept.pixels_b, wrong.pixels_b]),
            np.concatenate([kept.confidence, wrong.confidence])))

    return correspondences


def corrupt_pointmaps(scene: Scene, sigma: float, seed: int) -> Scene:
    '''
    Add isotropic Gaussian noise of standard deviation `sigma` to every point. Confidences
    become exp(-|noise|^2 / 2 sigma^2) clipped to [0.1, 1]. Labels and poses are untouched.
    '''

    if sigma < 0:
        raise SynthSpecError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return scene

    images = []
    for image in scene.images:
        rng = np.random.default_rng([seed, image.index, 4])
        noise = rng.normal(0.0, sigma, size=image.point_map.points.shape)
        confidence = np.clip(np.exp(-np.sum(noise ** 2, axis=2) / (2 * sigma ** 2)), 0.1, 1.0)
        images.append(replace(image, point_map=PointMap(image.point_map.points + noise, confidence)))

    return replace(scene, images=images)


def build_synth_scene(spec: SynthSpec, threads: int = 1) -> 'tuple[Scene, dict]':
    '''Full synthetic scene: render, over-segment, generate matches, add pointmap noise.'''

    scene, gt = generate(spec, threads)

    # The table stays one mask; only object masks are cut
    tables = {image.index: [int(i) for i in np.unique(image.label_map.labels[scene.background[image.index].labels != 0])]
              for image in scene.images}
    proposals = inject_oversegmentation({image.index: image.label_map.labels for image in scene.images},
                                        spec.overseg_k, spec.seed, keep_whole=tables)
    images = [replace(image, label_map=LabelMap(proposals[image.index])) for image in scene.images]
    scene = replace(scene, images=images)

    correspondences = generate_matches(scene, gt, spec.match_dropout, spec.spurious_rate, spec.seed,
                                       stride=spec.match_stride, fov_deg=spec.fov_deg)
    scene = corrupt_pointmaps(replace(scene, correspondences=correspondences),
                              spec.pointmap_noise_sigma, spec.seed)

    log_step("Synthetic matches",
             **{"Image pairs": correspondences,
                "Matches": sum(len(c) for c in correspondences)})

    return scene.validate(), gt


def write_synth_scene(scene: Scene, spec: SynthSpec, directory: str) -> str:

    manifest_path = write_scene(scene, directory)
    with open(os.path.join(directory, 'synth_spec.json'), 'w', encoding='utf-8') as spec_file:
        json.dump(spec.to_dict(), spec_file, indent=2)
        spec_file.write('\n')

    return manifest_path
