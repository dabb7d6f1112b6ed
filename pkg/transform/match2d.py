'''
Pixel-to-pixel edge addition: aggregate confident pixel matches into per-mask-pair
counts and connect mask pairs whose overlap ratio reaches the τ_2D threshold.
'''

import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from typing import Optional

import numpy as np
import pandas as pd

from misc.errors import ConfigError, SceneValidationError, SegFuseError
from misc.log_utils import log_step, log_warning
from misc.parse_config import PairPolicy, PipelineConfig
from scene.scene_model import CorrespondenceSet, MaskIndex, MaskRef, Scene
from transform.contraction import MaskGraph

COUNT_COLUMNS = ['image_a', 'label_a', 'image_b', 'label_b']


class MatchCountTable:
    '''
    Sparse table h(m1, m2) of matched pixel pairs per mask pair. Rows are stored in
    canonical order: the lower image index is always on the `a` side.
    '''

    def __init__(self, frame: Optional[pd.DataFrame] = None):
        if frame is None or frame.empty:
            frame = pd.DataFrame({column: pd.Series(dtype='int64') for column in COUNT_COLUMNS + ['count']})
        self.frame = frame.sort_values(COUNT_COLUMNS).reset_index(drop=True)

    def __len__(self) -> int:
        return len(self.frame)

    def get(self, ref_1, ref_2) -> int:
        ref_1, ref_2 = sorted((MaskRef(*ref_1), MaskRef(*ref_2)))
        row = self.frame[(self.frame['image_a'] == ref_1.image_index) & (self.frame['label_a'] == ref_1.local_id)
                         & (self.frame['image_b'] == ref_2.image_index) & (self.frame['label_b'] == ref_2.local_id)]
        return int(row['count'].iloc[0]) if len(row) else 0

    def items(self):
        for row in self.frame.itertuples(index=False):
            yield (MaskRef(row.image_a, row.label_a), MaskRef(row.image_b, row.label_b)), int(row.count)


def filter_confident(matches: CorrespondenceSet, min_conf: float) -> CorrespondenceSet:
    '''Keep the matches with confidence >= min_conf, in their original order.'''

    if not 0 <= min_conf <= 1:
        raise ConfigError(f"min_conf must be in [0, 1], got {min_conf}")

    # Compare in the stored precision so a threshold equal to a stored value keeps it
    return matches.select(matches.confidence >= np.float32(min_conf))


def dedupe_matches(matches: CorrespondenceSet) -> CorrespondenceSet:
    '''Drop repeated (pixel_a, pixel_b) pairs, keeping the first occurrence.'''

    if len(matches) < 2:
        return matches

    keys = np.concatenate([matches.pixels_a, matches.pixels_b], axis=1)
    _, first = np.unique(keys, axis=0, return_index=True)
    if len(first) == len(matches):
        return matches

    return matches.select(np.sort(first))


def subsample_matches(matches: CorrespondenceSet, max_n: int, seed) -> CorrespondenceSet:
    '''
    Uniform sample without replacement of at most `max_n` matches. The sample is fixed by
    `seed`, which may be an integer or a sequence of integers, and keeps the input order.
    '''

    if max_n < 1:
        raise ConfigError(f"max_n must be at least 1, got {max_n}")
    if len(matches) <= max_n:
        return matches

    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(matches), size=max_n, replace=False))
    return matches.select(keep)


def candidate_pairs(poses: list, policy: PairPolicy) -> list:
    '''
    Select image pairs taken from nearby camera poses.\n

    Parameters:
        `poses (list)` - CameraPose per image, in image order.\n
        `policy (PairPolicy)` - Angle and translation limits plus the per-image neighbor budget.\n

    Return:
        `pairs (list)` - Sorted (a, b) positions with a < b. A pair survives the limits when the
        geodesic rotation angle and the camera distance are both within bounds; each image then
        keeps its `k_nearest` best pairs by angle/max_angle + distance/max_translation, and a
        pair is retained when either of its images kept it.\n
    '''

    n_images = len(poses)
    if n_images < 2:
        return []

    rotations = np.stack([pose.rotation for pose in poses])
    positions = np.stack([pose.translation for pose in poses])

    # Angle of R_a^T R_b for every pair
    relative = np.einsum('aji,bjk->abik', rotations, rotations)
    cosine = (np.trace(relative, axis1=2, axis2=3) - 1.0) / 2.0
    angles = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    distances = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)

    allowed = (angles <= policy.max_angle_deg) & (distances <= policy.max_translation_m)
    np.fill_diagonal(allowed, False)
    score = angles / policy.max_angle_deg + distances / policy.max_translation_m

    if policy.k_nearest is None:
        keep = allowed
    else:
        keep = np.zeros_like(allowed)
        for a in range(n_images):
            neighbors = np.flatnonzero(allowed[a])
            order = np.lexsort((neighbors, score[a, neighbors]))
            keep[a, neighbors[order[:policy.k_nearest]]] = True
        keep = keep | keep.T

    return [(a, b) for a in range(n_images) for b in range(a + 1, n_images) if keep[a, b]]


def select_image_pairs(scene: Scene, config: PipelineConfig) -> list:
    '''
    Image index pairs (a < b) whose correspondences are used. Sparse captures with at most
    `sparse_view_max_images` views consider every pair.
    '''

    indices = [image.index for image in scene.images]
    if len(indices) <= config.sparse_view_max_images:
        positional = [(a, b) for a in range(len(indices)) for b in range(a + 1, len(indices))]
    else:
        positional = candidate_pairs(scene.poses, config.pair_policy)

    return sorted(tuple(sorted((indices[a], indices[b]))) for a, b in positional)


def _count_pair(label_maps: dict, corr: CorrespondenceSet) -> pd.DataFrame:

    labels_a = label_maps[corr.image_a]
    labels_b = label_maps[corr.image_b]
    local_a = labels_a[corr.pixels_a[:, 1], corr.pixels_a[:, 0]].astype(np.int64)
    local_b = labels_b[corr.pixels_b[:, 1], corr.pixels_b[:, 0]].astype(np.int64)

    # Matches touching an unassigned pixel on either side carry no mask evidence
    keep = (local_a != 0) & (local_b != 0)

    return pd.DataFrame({
        'image_a': np.full(int(keep.sum()), corr.image_a, dtype=np.int64),
        'label_a': local_a[keep],
        'image_b': np.full(int(keep.sum()), corr.image_b, dtype=np.int64),
        'label_b': local_b[keep],
    })


def match_counts(label_maps: dict, correspondences: list, threads: int = 1) -> MatchCountTable:
    '''
    Count matched pixel pairs per mask pair.\n

    Parameters:
        `label_maps (dict)` - Image index to label grid (2D uint16 array or LabelMap).\n
        `correspondences (list)` - CorrespondenceSets; their pixels must lie inside the label maps.\n
        `threads (int)` - Worker threads; the table does not depend on it.\n

    Return:
        `table (MatchCountTable)` - h for every mask pair with at least one match.\n
    '''

    grids = {index: getattr(labels, 'labels', labels) for index, labels in label_maps.items()}

    canonical = []
    for corr in correspondences:
        if corr.image_a == corr.image_b:
            log_warning(f"correspondences within image {corr.image_a} ignored")
            continue
        if corr.image_a > corr.image_b:
            corr = CorrespondenceSet(corr.image_b, corr.image_a, corr.pixels_b, corr.pixels_a, corr.confidence)
        canonical.append(corr)

    if not canonical:
        return MatchCountTable()

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        frames = list(executor.map(lambda corr: _count_pair(grids, corr), canonical))

    matched = pd.concat(frames, ignore_index=True)
    if matched.empty:
        return MatchCountTable()

    counts = matched.groupby(COUNT_COLUMNS).size().rename('count').reset_index()
    return MatchCountTable(counts)


def overlap_ratios(h: np.ndarray, g1: np.ndarray, g2: np.ndarray) -> 'tuple[np.ndarray, int]':
    '''Vectorized h / min(g1, g2), clamped to 1. Also returns how many values were clamped.'''

    h = np.asarray(h, dtype=np.float64)
    smaller = np.minimum(np.asarray(g1, dtype=np.float64), np.asarray(g2, dtype=np.float64))
    if smaller.size and smaller.min() < 1:
        raise SceneValidationError("zero-area mask")

    raw = h / smaller if smaller.size else h
    clamped = int(np.count_nonzero(raw > 1.0))

    return np.minimum(raw, 1.0), clamped


def overlap_ratio(h: int, g1: int, g2: int) -> float:
    '''
    Fraction of the smaller mask covered by matches, h / min(g1, g2). Values above 1 can only
    come from many-to-one matches; they are clamped with a warning.
    '''

    ratio, clamped = overlap_ratios(np.array([h]), np.array([g1]), np.array([g2]))
    if clamped:
        log_warning(f"overlap ratio {h}/{min(g1, g2)} exceeds 1, clamped")

    return float(ratio[0])


def percentile_threshold(ratios, percentile: float) -> float:
    '''
    Nearest-rank percentile: sort ascending and take the element at ceil(p/100 * n) - 1.
    The rank is computed in exact arithmetic so 70% of 10 is rank 7, not 8.
    '''

    ordered = np.sort(np.asarray(list(ratios), dtype=np.float64))
    if len(ordered) == 0:
        raise SegFuseError("no candidate pairs")
    if not 0 < percentile <= 100:
        raise ConfigError(f"percentile must be in (0, 100], got {percentile}")

    rank = math.ceil(Fraction(percentile) * len(ordered) / 100)
    return float(ordered[max(rank, 1) - 1])


def _prepare_matches(corr: CorrespondenceSet, config: PipelineConfig) -> CorrespondenceSet:

    matches = filter_confident(corr, config.min_match_confidence)
    matches = dedupe_matches(matches)

    # Each pair draws from its own stream so scheduling never changes the sample
    return subsample_matches(matches, config.max_matches_per_pair,
                             seed=[config.seed, corr.image_a, corr.image_b])


def build_2d_graph(scene: Scene,
                   config: PipelineConfig,
                   label_maps: Optional[dict] = None,
                   mask_index: Optional[MaskIndex] = None,
                   stats: Optional[dict] = None) -> MaskGraph:
    '''
    Build the pixel-correspondence graph G_2d.\n

    Parameters:
        `scene (Scene)` - Validated scene.\n
        `config (PipelineConfig)` - Thresholds, pair policy and seed.\n
        `label_maps (dict)` - Optional image index to label grid override, used by the pipeline to
        pass label maps with background pixels cleared.\n
        `mask_index (MaskIndex)` - Optional vertex numbering; built from the label maps if omitted.\n
        `stats (dict)` - Optional dictionary that receives τ_2D and counters.\n

    Return:
        `graph (MaskGraph)` - One vertex per mask, an edge for every mask pair whose overlap ratio
        reaches τ_2D.\n
    '''

    if label_maps is None:
        label_maps = {image.index: image.label_map.labels for image in scene.images}
    if mask_index is None:
        mask_index = MaskIndex.from_label_maps(label_maps)

    pairs = set(select_image_pairs(scene, config))
    selected = []
    for corr in scene.correspondences:
        if corr.image_a == corr.image_b:
            log_warning(f"correspondences within image {corr.image_a} ignored")
            continue
        if tuple(sorted((corr.image_a, corr.image_b))) in pairs:
            selected.append(corr)

    threads = config.resolved_threads
    with ThreadPoolExecutor(max_workers=threads) as executor:
        prepared = list(executor.map(lambda corr: _prepare_matches(corr, config), selected))

    table = match_counts(label_maps, prepared, threads)
    frame = table.frame

    areas = {index: dict(zip(*np.unique(labels, return_counts=True))) for index, labels in label_maps.items()}
    g1 = np.array([areas[a][la] for a, la in zip(frame['image_a'], frame['label_a'])], dtype=np.float64)
    g2 = np.array([areas[b][lb] for b, lb in zip(frame['image_b'], frame['label_b'])], dtype=np.float64)
    ratios, clamped = overlap_ratios(frame['count'].to_numpy(), g1, g2)
    if clamped:
        log_warning(f"{clamped} overlap ratios exceeded 1 and were clamped")

    if config.tau2d_override is not None:
        tau_2d = float(config.tau2d_override)
    elif len(ratios):
        tau_2d = percentile_threshold(ratios, config.tau2d_percentile)
    else:
        log_warning("no mask pairs share a match, the 2D graph has no edges")
        tau_2d = None

    edges = []
    if tau_2d is not None:
        for row, ratio in zip(frame.itertuples(index=False), ratios):
            if ratio >= tau_2d:
                edges.append((mask_index.vertex((row.image_a, row.label_a)),
                              mask_index.vertex((row.image_b, row.label_b))))

    graph = MaskGraph(mask_index.vertices, edges)

    log_step("2D correspondence graph",
             **{"Image pairs used": len(prepared),
                "Mask pairs with matches": len(frame),
                "Masks": graph.num_vertices,
                "Edges": graph.num_edges})

    if stats is not None:
        stats.update({'tau2d': tau_2d,
                      'image_pairs': len(prepared),
                      'mask_pairs_matched': len(frame),
                      'ratios_clamped': clamped,
                      'graph2d_vertices': graph.num_vertices,
                      'graph2d_edges': graph.num_edges})

    return graph
