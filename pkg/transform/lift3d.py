'''
Structural 3D edge addition: lift every supervertex to a point cloud, connect supervertices
whose clouds are subsumed in one another (directed Chamfer), and contract again.
'''

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from misc.errors import EmptyCloudError
from misc.log_utils import log_info, log_step, log_warning
from misc.parse_config import PipelineConfig
from scene.scene_model import MaskIndex, Scene
from transform.contraction import MaskGraph, Partition, compose, contract

LABEL_RANGE = 1 << 16


@dataclass(frozen=True)
class SuperVertexCloud:
    '''
    Lifted points of one supervertex. `source` holds one (image index, x, y) row per point,
    aligned with `points`.
    '''
    supervertex: int
    points: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0


class NeighborIndex:
    '''Exact nearest neighbour lookups over one cloud.'''

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloudError("cannot index an empty cloud")
        self.tree = cKDTree(self.points)

    def squared_distances(self, queries: np.ndarray) -> np.ndarray:

        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _, nearest = self.tree.query(queries, k=1)

        # Recompute from coordinates so the result matches a brute-force sum of squares bit for bit
        return np.sum((queries - self.points[nearest]) ** 2, axis=1)


def directed_chamfer(x_points: np.ndarray, y_points: np.ndarray, index: Optional[NeighborIndex] = None) -> float:
    '''
    Mean over the points of X of the squared distance to the closest point of Y, in m².
    Zero means X is contained in Y. Pass a prebuilt `index` over Y to reuse it.
    '''

    x_points = np.asarray(x_points, dtype=np.float64).reshape(-1, 3)
    if len(x_points) == 0:
        raise EmptyCloudError("directed Chamfer distance of an empty cloud")
    if index is None:
        index = NeighborIndex(y_points)

    return float(np.mean(index.squared_distances(x_points)))


def supervertex_cloud(partition: Partition,
                      scene: Scene,
                      min_point_conf: float,
                      mask_index: MaskIndex,
                      label_maps: Optional[dict] = None) -> dict:
    '''
    Lift every supervertex of a mask-level partition to 3D.\n

    Parameters:
        `partition (Partition)` - Partition over the vertex ids of `mask_index`.\n
        `scene (Scene)` - Scene providing the pointmaps.\n
        `min_point_conf (float)` - Pointmap entries below this confidence are dropped.\n
        `mask_index (MaskIndex)` - Vertex id <-> MaskRef mapping.\n
        `label_maps (dict)` - Optional image index to label grid override.\n

    Return:
        `clouds (dict)` - Supervertex id to SuperVertexCloud, one entry per supervertex. Points
        are ordered by image, then row-major within an image. Supervertices with no point left
        after filtering get an empty cloud.\n
    '''

    if label_maps is None:
        label_maps = {image.index: image.label_map.labels for image in scene.images}

    lookups = {}
    for vertex, supervertex in partition.assignment.items():
        ref = mask_index.ref(vertex)
        lookup = lookups.setdefault(ref.image_index, np.full(LABEL_RANGE, -1, dtype=np.int64))
        lookup[ref.local_id] = supervertex

    owners, points, sources = [], [], []
    for image in sorted(scene.images, key=lambda image: image.index):
        if image.index not in lookups:
            continue
        owner = lookups[image.index][label_maps[image.index]]
        confidence = image.point_map.confidence
        keep = (owner >= 0) & (confidence >= confidence.dtype.type(min_point_conf))
        keep &= np.isfinite(image.point_map.points).all(axis=2)

        ys, xs = np.nonzero(keep)
        owners.append(owner[ys, xs])
        points.append(image.point_map.points[ys, xs].astype(np.float64))
        sources.append(np.stack([np.full(len(xs), image.index, dtype=np.int64), xs, ys], axis=1))

    if owners:
        owners = np.concatenate(owners)
        points = np.concatenate(points)
        sources = np.concatenate(sources)
    else:
        owners, points, sources = np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)

    order = np.argsort(owners, kind='stable')
    owners, points, sources = owners[order], points[order], sources[order]
    bounds = np.searchsorted(owners, list(partition.members), side='left'), \
        np.searchsorted(owners, list(partition.members), side='right')

    return {sv: SuperVertexCloud(sv, points[start:stop], sources[start:stop])
            for sv, start, stop in zip(partition.members, *bounds)}


def _cap_points(cloud: SuperVertexCloud, max_points: int, seed: int) -> np.ndarray:

    if len(cloud) <= max_points:
        return cloud.points
    rng = np.random.default_rng([seed, cloud.supervertex])
    return cloud.points[np.sort(rng.choice(len(cloud), size=max_points, replace=False))]


def _box_gaps(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:

    # Squared distance between axis-aligned boxes: a lower bound for any point-to-point distance
    gap = np.maximum(lower[:, None, :] - upper[None, :, :], lower[None, :, :] - upper[:, None, :])
    return np.sum(np.maximum(gap, 0.0) ** 2, axis=2)


def build_3d_graph(clouds: dict,
                   tau_3d: float,
                   max_cloud_points: int = 50000,
                   seed: int = 0,
                   threads: int = 1) -> MaskGraph:
    '''
    Connect two supervertices when either cloud is subsumed in the other, that is when the
    directed Chamfer distance in one direction or the other is at most `tau_3d`. Only
    supervertices with a non-empty cloud become vertices.
    '''

    ids = sorted(sv for sv, cloud in clouds.items() if not cloud.is_empty)
    if len(ids) < 2 or tau_3d <= 0:
        return MaskGraph(ids)

    points = [_cap_points(clouds[sv], max_cloud_points, seed) for sv in ids]
    lower = np.stack([p.min(axis=0) for p in points])
    upper = np.stack([p.max(axis=0) for p in points])

    gaps = _box_gaps(lower, upper)
    left, right = np.nonzero(np.triu(gaps <= tau_3d, k=1))
    if len(left) == 0:
        return MaskGraph(ids)

    needed = sorted(set(left.tolist()) | set(right.tolist()))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        indices = dict(zip(needed, executor.map(lambda i: NeighborIndex(points[i]), needed)))

        def subsumed(pair):
            i, j = pair
            if directed_chamfer(points[i], None, indices[j]) <= tau_3d:
                return True
            return directed_chamfer(points[j], None, indices[i]) <= tau_3d

        pairs = list(zip(left.tolist(), right.tolist()))
        linked = list(executor.map(subsumed, pairs))

    edges = [(ids[i], ids[j]) for (i, j), keep in zip(pairs, linked) if keep]
    return MaskGraph(ids, edges)


def refine(partition_2d: Partition,
           scene: Scene,
           config: PipelineConfig,
           mask_index: MaskIndex,
           label_maps: Optional[dict] = None,
           stats: Optional[dict] = None) -> Partition:
    '''
    Run the 3D stage on top of the 2D partition and return the final mask-level partition.
    The result is always a coarsening of `partition_2d`.
    '''

    if stats is None:
        stats = {}

    if not config.enable_3d or config.tau3d <= 0:
        log_info("3D stage skipped")
        stats.update({'graph3d_vertices': len(partition_2d), 'graph3d_edges': 0, 'rounds3d': 0,
                      'empty_clouds': 0})
        return partition_2d

    clouds = supervertex_cloud(partition_2d, scene, config.min_point_confidence, mask_index, label_maps)
    empty = [sv for sv, cloud in clouds.items() if cloud.is_empty]
    if empty:
        log_warning(f"{len(empty)} supervertices have no confident points and are left out of the 3D graph")

    graph_3d = build_3d_graph(clouds, config.tau3d, config.max_cloud_points,
                              config.seed, config.resolved_threads)

    # Empty-cloud supervertices stay as isolated vertices so the partition remains total
    partition_3d = contract(MaskGraph(list(partition_2d.members), graph_3d.edges), config.seed)
    final = compose(partition_2d, partition_3d)

    log_step("3D structural graph",
             **{"Supervertex clouds": len(clouds),
                "Empty clouds": len(empty),
                "Edges": graph_3d.num_edges,
                "Supervertices after 3D": len(final)})

    stats.update({'graph3d_vertices': graph_3d.num_vertices,
                  'graph3d_edges': graph_3d.num_edges,
                  'rounds3d': partition_3d.rounds,
                  'empty_clouds': len(empty)})

    return final
