'''
Evaluation against ground-truth object maps: IoU, F1, precision, symmetric Chamfer
distance, IoU of the Chamfer-selected class and pixel utility.
'''

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from misc.errors import MetricsError
from misc.log_utils import log_step, log_warning
from scene.scene_model import Scene
from transform.lift3d import NeighborIndex

MEAN_COLUMNS = ['iou', 'f1', 'd_chamfer', 'iou_sel', 'precision']


def iou(a: set, b: set) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        raise MetricsError("IoU of two empty sets is undefined")
    intersection = len(a & b)
    return intersection / (len(a) + len(b) - intersection)


def f1(a: set, b: set) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        raise MetricsError("F1 of two empty sets is undefined")
    return 2 * len(a & b) / (len(a) + len(b))


def precision(predicted: set, target: set) -> float:
    '''Share of the predicted pixels that lie inside the target.'''

    predicted = set(predicted)
    if not predicted:
        raise MetricsError("precision of an empty prediction is undefined")
    return len(predicted & set(target)) / len(predicted)


def _squared_sum(queries: np.ndarray, index: NeighborIndex) -> float:
    return float(np.sum(index.squared_distances(queries)))


def symmetric_chamfer(s_points: np.ndarray, t_points: np.ndarray,
                      s_index: Optional[NeighborIndex] = None,
                      t_index: Optional[NeighborIndex] = None) -> float:
    '''
    Symmetric Chamfer distance in m², as unnormalized sums:
    sum over S of the squared distance to T plus sum over T of the squared distance to S.
    '''

    s_points = np.asarray(s_points, dtype=np.float64).reshape(-1, 3)
    t_points = np.asarray(t_points, dtype=np.float64).reshape(-1, 3)
    if len(s_points) == 0 or len(t_points) == 0:
        raise MetricsError("Chamfer distance of an empty point set is undefined")

    s_index = s_index or NeighborIndex(s_points)
    t_index = t_index or NeighborIndex(t_points)

    return _squared_sum(s_points, t_index) + _squared_sum(t_points, s_index)


@dataclass(frozen=True)
class ObjectMatchReport:
    object_id: int
    gt_pixels: int
    class_by_iou: Optional[int]
    class_by_chamfer: Optional[int]
    iou: float
    f1: float
    precision: float
    chamfer: Optional[float]
    iou_sel: Optional[float]

    def to_dict(self) -> dict:
        return {
            'object_id': self.object_id,
            'gt_pixels': self.gt_pixels,
            'class_by_iou': self.class_by_iou,
            'class_by_chamfer': self.class_by_chamfer,
            'iou': self.iou,
            'f1': self.f1,
            'precision': self.precision,
            'd_chamfer': self.chamfer,
            'iou_sel': self.iou_sel,
        }


@dataclass
class MetricsReport:
    '''
    Per-object reports of one or more scenes plus the pixel utility of each scene. Means are
    taken over the objects that have a value; the utility is summarized by mean and median.
    '''
    objects: list
    utilities: list
    diagnostics: list = field(default_factory=list)

    def per_object_frame(self) -> pd.DataFrame:
        columns = ['object_id', 'gt_pixels', 'class_by_iou', 'class_by_chamfer'] + MEAN_COLUMNS
        return pd.DataFrame([report.to_dict() for report in self.objects], columns=columns)

    def means(self) -> dict:

        frame = self.per_object_frame()
        means = {}
        for column in MEAN_COLUMNS:
            values = pd.to_numeric(frame[column], errors='coerce').dropna()
            means[column] = float(values.mean()) if len(values) else None

        return means

    @property
    def pixel_utility(self) -> dict:
        if not self.utilities:
            return {'mean': None, 'median': None}
        return {'mean': float(np.mean(self.utilities)), 'median': float(np.median(self.utilities))}

    def to_dict(self) -> dict:
        return {
            'per_object': [report.to_dict() for report in self.objects],
            'means': self.means(),
            'pixel_utility': self.pixel_utility,
            'scenes': len(self.utilities),
            'diagnostics': list(self.diagnostics),
        }

    def table_row(self) -> str:
        '''IoU, F1, d_chamfer and IoU_sel means on one line, rounded to four decimals.'''

        means = self.means()
        return ' '.join('n/a' if means[key] is None else str(round(means[key], 4))
                        for key in ('iou', 'f1', 'd_chamfer', 'iou_sel'))


def _stack_maps(pred_maps: dict, gt_maps: dict) -> 'tuple[np.ndarray, np.ndarray, list]':

    if set(pred_maps) != set(gt_maps):
        raise MetricsError(f"prediction covers images {sorted(pred_maps)} but ground truth covers {sorted(gt_maps)}")

    predicted, target, order = [], [], sorted(gt_maps)
    for index in order:
        pred = np.asarray(getattr(pred_maps[index], 'labels', pred_maps[index]))
        gt = np.asarray(getattr(gt_maps[index], 'labels', gt_maps[index]))
        if pred.shape != gt.shape:
            raise MetricsError(f"image {index}: prediction is {pred.shape} but ground truth is {gt.shape}")
        predicted.append(pred.ravel().astype(np.int64))
        target.append(gt.ravel().astype(np.int64))

    return np.concatenate(predicted), np.concatenate(target), order


def _lifted_points(scene: Scene, maps: dict, order: list, min_point_conf: float) -> pd.DataFrame:
    '''Confident, finite 3D points of every labeled pixel, with the pixel's label.'''

    frames = []
    for index in order:
        labels = np.asarray(getattr(maps[index], 'labels', maps[index]))
        point_map = scene.image(index).point_map
        keep = (labels != 0) & (point_map.confidence >= point_map.confidence.dtype.type(min_point_conf))
        keep &= np.isfinite(point_map.points).all(axis=2)
        ys, xs = np.nonzero(keep)
        points = point_map.points[ys, xs].astype(np.float64)
        frames.append(pd.DataFrame({'label': labels[ys, xs].astype(np.int64),
                                    'x': points[:, 0], 'y': points[:, 1], 'z': points[:, 2]}))

    return pd.concat(frames, ignore_index=True)


def _point_groups(lifted: pd.DataFrame) -> dict:
    return {int(label): group[['x', 'y', 'z']].to_numpy() for label, group in lifted.groupby('label', sort=True)}


def match_objects(pred_maps: dict,
                  gt_maps: dict,
                  scene: Scene,
                  min_point_confidence: float = 0.5,
                  expected_ids: Optional[list] = None) -> 'tuple[list, list]':
    '''
    Match every ground-truth object to predicted classes.\n

    Parameters:
        `pred_maps (dict)` - Image index to predicted global label map (class 0 = background).\n
        `gt_maps (dict)` - Image index to ground-truth object map (0 = background).\n
        `scene (Scene)` - Scene whose pointmaps lift pixels to 3D for the Chamfer selection.\n
        `min_point_confidence (float)` - Pointmap confidence filter for lifted points.\n
        `expected_ids (list)` - Optional object ids that should be scored; ids absent from every
        view are skipped with a diagnostic.\n

    Return:
        `reports (list)` - ObjectMatchReport per visible object, ordered by object id. The
        class with the highest IoU gives iou, f1 and precision; the class with the lowest
        symmetric Chamfer distance gives d_chamfer and iou_sel. Ties go to the lower class id.\n
        `diagnostics (list)` - Human readable notes about skipped or degenerate cases.\n
    '''

    predicted, target, order = _stack_maps(pred_maps, gt_maps)
    diagnostics = []

    object_sizes = pd.Series(target[target != 0]).value_counts().sort_index()
    class_sizes = pd.Series(predicted[predicted != 0]).value_counts().sort_index()

    object_ids = [int(i) for i in object_sizes.index]
    if expected_ids is not None:
        missing = sorted(set(int(i) for i in expected_ids) - set(object_ids))
        for object_id in missing:
            diagnostics.append(f"object {object_id} is not visible in any view, skipped")
        object_ids = [i for i in object_ids if i in set(int(e) for e in expected_ids)]

    if class_sizes.empty:
        diagnostics.append("no foreground classes in the prediction")
        for message in diagnostics:
            log_warning(message)
        return [ObjectMatchReport(object_id, int(object_sizes[object_id]), None, None, 0.0, 0.0, 0.0, None, 0.0)
                for object_id in object_ids], diagnostics

    both = (target != 0) & (predicted != 0)
    overlap = pd.DataFrame({'object': target[both], 'label': predicted[both]}).groupby(['object', 'label']).size()

    class_ids = np.array(class_sizes.index, dtype=np.int64)
    class_counts = class_sizes.to_numpy(dtype=np.float64)

    gt_points = _point_groups(_lifted_points(scene, gt_maps, order, min_point_confidence))
    class_points = _point_groups(_lifted_points(scene, pred_maps, order, min_point_confidence))
    class_indices = {label: NeighborIndex(points) for label, points in class_points.items()}

    reports = []
    for object_id in object_ids:
        size = float(object_sizes[object_id])
        intersections = np.zeros(len(class_ids))
        if object_id in overlap.index.get_level_values(0):
            hits = overlap.loc[object_id]
            intersections[np.searchsorted(class_ids, hits.index.to_numpy())] = hits.to_numpy()

        ious = intersections / (size + class_counts - intersections)
        best = int(np.argmax(ious))

        chamfer, chamfer_class, iou_sel = None, None, None
        if object_id in gt_points and class_indices:
            object_index = NeighborIndex(gt_points[object_id])
            distances = {label: symmetric_chamfer(gt_points[object_id], points, object_index, class_indices[label])
                         for label, points in class_points.items()}
            chamfer_class = min(distances, key=lambda label: (distances[label], label))
            chamfer = distances[chamfer_class]
            iou_sel = float(ious[np.searchsorted(class_ids, chamfer_class)])
        else:
            diagnostics.append(f"object {object_id} has no confident 3D points, Chamfer distance unavailable")

        reports.append(ObjectMatchReport(
            object_id=object_id,
            gt_pixels=int(size),
            class_by_iou=int(class_ids[best]),
            class_by_chamfer=chamfer_class,
            iou=float(ious[best]),
            f1=float(2 * intersections[best] / (size + class_counts[best])),
            precision=float(intersections[best] / class_counts[best]),
            chamfer=chamfer,
            iou_sel=iou_sel,
        ))

    for message in diagnostics:
        log_warning(message)

    return reports, diagnostics


def pixel_utility(pred_maps: dict, gt_maps: dict) -> float:
    '''
    Foreground pixels predicted over ground-truth foreground pixels, summed over all images.
    Returned unclamped; a value above 1 means background was labeled as foreground.
    '''

    predicted, target, _ = _stack_maps(pred_maps, gt_maps)
    gt_foreground = int(np.count_nonzero(target))
    if gt_foreground == 0:
        raise MetricsError("ground truth has no foreground pixels")

    utility = np.count_nonzero(predicted) / gt_foreground
    if utility > 1:
        log_warning(f"pixel utility {utility:.4f} exceeds 1: background pixels were labeled as foreground")

    return float(utility)


def evaluate(result,
             scene: Scene,
             gt_maps: Optional[dict] = None,
             expected_ids: Optional[list] = None) -> MetricsReport:
    '''
    Score one segmentation result against the scene's ground truth (or `gt_maps` when given).
    '''

    if gt_maps is None:
        if not scene.ground_truth:
            raise MetricsError("scene has no ground-truth maps")
        gt_maps = {index: label_map.labels for index, label_map in scene.ground_truth.items()}

    min_conf = result.config.min_point_confidence if result.config is not None else 0.5
    reports, diagnostics = match_objects(result.label_maps, gt_maps, scene, min_conf, expected_ids)
    report = MetricsReport(objects=reports,
                           utilities=[pixel_utility(result.label_maps, gt_maps)],
                           diagnostics=diagnostics)

    log_step("Evaluation", **{"Objects scored": reports, "Diagnostics": diagnostics})

    return report


def combine_reports(reports: list) -> MetricsReport:
    '''Pool the objects of several scenes; utilities stay per scene for the mean/median summary.'''

    return MetricsReport(objects=[obj for report in reports for obj in report.objects],
                         utilities=[u for report in reports for u in report.utilities],
                         diagnostics=[d for report in reports for d in report.diagnostics])
