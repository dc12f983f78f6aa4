"""
Average precision at 3D IoU thresholds, pooled over scenes per class.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .Exceptions import ArgumentError
from .Geometry import OrientedBox3D, box_iou_3d

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.25, 0.5)

GroundTruth = Tuple[OrientedBox3D, int]


@dataclass
class MatchRecord:
    scene_id: str
    class_id: int
    score: float
    true_positive: bool
    iou: float


@dataclass
class EvalResult:
    """
    Per-class AP for each IoU threshold, mAP over the classes with at least one
    ground-truth instance, and the TP/FP record of every detection.
    """
    class_names: List[str]
    thresholds: List[float]
    ap: Dict[float, List[float]]
    map: Dict[float, float]
    num_gt: List[int]
    matches: Dict[float, List[MatchRecord]] = field(default_factory=dict)

    def class_ap(self, threshold: float) -> Dict[str, float]:
        return dict(zip(self.class_names, self.ap[threshold]))

    def to_dict(self) -> Dict[str, Any]:
        def clean(value: float):
            return None if math.isnan(value) else value
        return {
            'class_names': self.class_names,
            'num_gt': dict(zip(self.class_names, self.num_gt)),
            'thresholds': [
                {
                    'iou': t,
                    'map': clean(self.map[t]),
                    'ap': {name: clean(ap) for name, ap in zip(self.class_names, self.ap[t])},
                    'true_positives': sum(m.true_positive for m in self.matches.get(t, [])),
                    'detections': len(self.matches.get(t, [])),
                }
                for t in self.thresholds
            ],
        }

    def table(self, threshold: float = 0.25, label: str = 'model') -> str:
        return format_table(self.class_names, {label: self}, threshold)


def match_detections(dets: Sequence[Tuple[int, float, OrientedBox3D]], gts: Sequence[GroundTruth],
                     iou_threshold: float) -> Tuple[List[bool], List[float]]:
    """
    Greedy matching in descending score order (ties by input order).

    A detection is a true positive when the unmatched same-class ground truth with the
    highest IoU (ties to the lowest index) reaches `iou_threshold`; that ground truth is
    then consumed.

    :param dets: (class_id, score, box) triples in any order.
    :return: TP flags and best IoUs, aligned with `dets`.
    """
    flags = [False] * len(dets)
    ious = [0.0] * len(dets)
    matched = [False] * len(gts)
    for i in sorted(range(len(dets)), key=lambda i: (-dets[i][1], i)):
        class_id, _, box = dets[i]
        best, best_iou = -1, -1.0
        for j, (gt_box, gt_class) in enumerate(gts):
            if matched[j] or gt_class != class_id:
                continue
            iou = box_iou_3d(box, gt_box)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            ious[i] = best_iou
            if best_iou >= iou_threshold:
                matched[best] = True
                flags[i] = True
    return flags, ious


def average_precision(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> float:
    """
    All-point interpolated AP: sum over recall steps of the recall increase times
    the best precision at that recall or beyond. NaN when `num_gt` is 0.
    """
    if num_gt < 0:
        raise ArgumentError(f'num_gt must be non-negative, not {num_gt}.')
    if num_gt == 0:
        return float('nan')
    if len(flags) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='stable')
    hits = np.asarray(flags, dtype=bool)[order]
    true_positives = np.cumsum(hits)
    false_positives = np.cumsum(~hits)
    recall = true_positives / num_gt
    precision = true_positives / (true_positives + false_positives)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(min(1.0, max(0.0, np.sum(steps * envelope))))


def evaluate(detections: Mapping[str, Sequence[Tuple[int, float, OrientedBox3D]]],
             ground_truth: Mapping[str, Sequence[GroundTruth]], class_names: Sequence[str],
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalResult:
    """
    :param detections: scene_id -> (class_id, score, box) triples.
    :param ground_truth: scene_id -> (box, class_id) pairs; scenes without detections count as misses.
    :raises ArgumentError: On a class id outside `class_names` or detections for an unknown scene.
    """
    num_classes = len(class_names)
    unknown_scenes = sorted(set(detections) - set(ground_truth))
    if unknown_scenes:
        raise ArgumentError(f'Detections for scenes without ground truth: {unknown_scenes}.')
    for scene_id, dets in detections.items():
        for class_id, _, _ in dets:
            if not 0 <= class_id < num_classes:
                raise ArgumentError(f'{scene_id}: unknown class id {class_id}.')
    for scene_id, gts in ground_truth.items():
        for _, class_id in gts:
            if not 0 <= class_id < num_classes:
                raise ArgumentError(f'{scene_id}: unknown ground-truth class id {class_id}.')

    num_gt = [0] * num_classes
    for gts in ground_truth.values():
        for _, class_id in gts:
            num_gt[class_id] += 1

    result = EvalResult(list(class_names), [float(t) for t in thresholds], {}, {}, num_gt)
    for threshold in result.thresholds:
        records: List[MatchRecord] = []
        for scene_id in sorted(ground_truth):
            dets = list(detections.get(scene_id, []))
            flags, ious = match_detections(dets, ground_truth[scene_id], threshold)
            for i in sorted(range(len(dets)), key=lambda i: (-dets[i][1], i)):
                records.append(MatchRecord(scene_id, dets[i][0], dets[i][1], flags[i], ious[i]))
        per_class = []
        for class_id in range(num_classes):
            rows = [r for r in records if r.class_id == class_id]
            per_class.append(average_precision([r.true_positive for r in rows], [r.score for r in rows],
                                               num_gt[class_id]))
        counted = [ap for ap in per_class if not math.isnan(ap)]
        result.ap[threshold] = per_class
        result.map[threshold] = float(np.mean(counted)) if counted else float('nan')
        result.matches[threshold] = records
        logger.info(f'mAP@{threshold}: {result.map[threshold]:.4f}')
    return result


def format_table(class_names: Sequence[str], rows: Mapping[str, EvalResult], threshold: float = 0.25) -> str:
    """One row per model, one column per class, then mAP; AP values in percent."""
    labels = list(rows)
    label_width = max([len('model')] + [len(label) for label in labels])
    widths = [max(len(name), 6) for name in class_names]
    header = ' '.join([f'{"model":<{label_width}}'] + [f'{name:>{w}}' for name, w in zip(class_names, widths)]
                      + [f'{"mAP":>6}'])
    lines = [f'mAP@{threshold}', header, '-' * len(header)]

    def cell(value: float, width: int) -> str:
        return f'{"-":>{width}}' if math.isnan(value) else f'{100.0 * value:>{width}.1f}'

    for label, result in rows.items():
        aps = result.ap[threshold]
        lines.append(' '.join([f'{label:<{label_width}}'] + [cell(ap, w) for ap, w in zip(aps, widths)]
                              + [cell(result.map[threshold], 6)]))
    return '\n'.join(lines)


def write_report(path: Union[str, Path], result: EvalResult, extra: Optional[Mapping[str, Any]] = None) -> None:
    Path(path).write_text(json.dumps({**result.to_dict(), **(extra or {})}, indent=2))
    logger.info(f'Wrote evaluation report to {path}.')


def mean_result(results: Sequence[EvalResult]) -> EvalResult:
    """Class-wise mean AP and mean mAP over repeated runs of the same evaluation."""
    if not results:
        raise ArgumentError('mean_result needs at least one result.')
    first = results[0]
    ap = {t: np.mean([r.ap[t] for r in results], axis=0).tolist() for t in first.thresholds}
    maps = {t: float(np.mean([r.map[t] for r in results])) for t in first.thresholds}
    return EvalResult(first.class_names, first.thresholds, ap, maps, first.num_gt)
