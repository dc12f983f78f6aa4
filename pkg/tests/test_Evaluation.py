"""AP and mAP on hand-built fixtures, plus a multi-scene run against a loop-based reimplementation."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from pymlcvnet.Evaluation import (EvalResult, average_precision, evaluate, format_table, match_detections,
                                  mean_result, write_report)
from pymlcvnet.Exceptions import ArgumentError
from pymlcvnet.Geometry import OrientedBox3D, box_iou_3d

from conftest import box

CLASSES = ['table', 'chair', 'cabinet']


# ── Oracle ───────────────────────────────────────────────────────────────

def _oracle_map(detections, ground_truth, num_classes, threshold):
    """Per-class VOC-style AP written with plain loops."""
    aps = []
    for c in range(num_classes):
        total = sum(1 for gts in ground_truth.values() for _, k in gts if k == c)
        if total == 0:
            continue
        rows = []
        for scene_id in sorted(ground_truth):
            dets = detections.get(scene_id, [])
            gts = ground_truth[scene_id]
            used = [False] * len(gts)
            order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
            for i in order:
                k, score, b = dets[i]
                best, best_iou = None, -1.0
                for j, (g, gk) in enumerate(gts):
                    if used[j] or gk != k:
                        continue
                    value = box_iou_3d(b, g)
                    if value > best_iou:
                        best, best_iou = j, value
                hit = best is not None and best_iou >= threshold
                if hit:
                    used[best] = True
                if k == c:
                    rows.append((score, hit))
        rows.sort(key=lambda r: -r[0])
        tp = fp = 0
        precisions, recalls = [], []
        for _, hit in rows:
            tp += hit
            fp += not hit
            precisions.append(tp / (tp + fp))
            recalls.append(tp / total)
        ap, previous_recall = 0.0, 0.0
        for i, recall in enumerate(recalls):
            ap += (recall - previous_recall) * max(precisions[i:])
            previous_recall = recall
        aps.append(ap)
    return sum(aps) / len(aps)


def _noisy_fixture(rng, scenes=10):
    detections, ground_truth = {}, {}
    for s in range(scenes):
        scene_id = f'scene_{s:06d}'
        gts = []
        for i in range(int(rng.integers(1, 5))):
            gts.append((OrientedBox3D([3.0 * i, s * 0.1, 0.5], rng.uniform(0.5, 1.2, 3), rng.uniform(-3, 3)),
                        int(rng.integers(3))))
        dets = []
        for gt_box, class_id in gts:
            if rng.uniform() < 0.85:
                noisy = OrientedBox3D(gt_box.center + rng.normal(scale=0.12, size=3),
                                      gt_box.size * rng.uniform(0.8, 1.2, 3), gt_box.yaw + rng.normal(scale=0.2))
                dets.append((class_id if rng.uniform() < 0.9 else int(rng.integers(3)), float(rng.uniform()), noisy))
        for _ in range(int(rng.integers(0, 3))):
            dets.append((int(rng.integers(3)), float(rng.uniform()),
                         OrientedBox3D(rng.uniform(-2, 10, 3), rng.uniform(0.3, 1.0, 3), 0.0)))
        detections[scene_id] = dets
        ground_truth[scene_id] = gts
    return detections, ground_truth


# ── Average precision ────────────────────────────────────────────────────

def test_false_positive_then_true_positive_is_half():
    assert average_precision([False, True], [0.9, 0.8], num_gt=1) == pytest.approx(0.5)


def test_perfect_ranking_is_one():
    assert average_precision([True, True, False], [0.9, 0.8, 0.1], num_gt=2) == 1.0


def test_no_ground_truth_is_undefined_and_no_detections_is_zero():
    assert math.isnan(average_precision([False], [0.5], num_gt=0))
    assert average_precision([], [], num_gt=3) == 0.0


def test_appending_a_lowest_score_detection_keeps_the_prefix():
    flags, scores = [True, False, True, False], [0.9, 0.7, 0.6, 0.2]
    reference = average_precision(flags, scores, num_gt=4)
    assert average_precision(flags + [False], scores + [0.1], num_gt=4) == reference
    assert average_precision(flags + [True], scores + [0.1], num_gt=4) > reference


def test_ap_depends_only_on_the_score_order(rng):
    detections, ground_truth = _noisy_fixture(rng)
    transformed = {scene_id: [(k, math.exp(4.0 * score) - 1.0, b) for k, score, b in dets]
                   for scene_id, dets in detections.items()}
    reference = evaluate(detections, ground_truth, CLASSES, thresholds=(0.25, 0.5))
    result = evaluate(transformed, ground_truth, CLASSES, thresholds=(0.25, 0.5))
    for threshold in (0.25, 0.5):
        np.testing.assert_allclose(result.ap[threshold], reference.ap[threshold], rtol=0, atol=1e-12)


# ── Matching ─────────────────────────────────────────────────────────────

def test_greedy_matching_fixture():
    gts = [(box([0, 0, 0.5]), 0), (box([3, 0, 0.5]), 0)]
    dets = [
        (0, 0.8, box([0.05, 0, 0.5])),
        (0, 0.9, box([0, 0, 0.5])),
        (1, 0.7, box([3, 0, 0.5])),
    ]
    flags, ious = match_detections(dets, gts, 0.25)
    assert flags == [False, True, False]
    assert ious[1] == pytest.approx(1.0)
    assert ious[0] == 0.0


def test_evaluate_on_the_matching_fixture():
    gts = {'a': [(box([0, 0, 0.5]), 0), (box([3, 0, 0.5]), 0)]}
    dets = {'a': [(0, 0.9, box([0, 0, 0.5])), (0, 0.8, box([0.05, 0, 0.5])), (1, 0.7, box([3, 0, 0.5]))]}
    result = evaluate(dets, gts, CLASSES[:2], thresholds=(0.25,))
    assert result.ap[0.25][0] == pytest.approx(0.5)
    assert math.isnan(result.ap[0.25][1])
    assert result.map[0.25] == pytest.approx(0.5)
    assert result.num_gt == [2, 0]


def test_matches_loop_oracle_on_noisy_scenes(rng):
    detections, ground_truth = _noisy_fixture(rng)
    result = evaluate(detections, ground_truth, CLASSES, thresholds=(0.25, 0.5))
    for threshold in (0.25, 0.5):
        assert result.map[threshold] == pytest.approx(_oracle_map(detections, ground_truth, 3, threshold), abs=1e-9)
    assert result.map[0.5] <= result.map[0.25]


def test_scenes_without_detections_count_as_misses():
    gts = {'a': [(box([0, 0, 0.5]), 0)], 'b': [(box([0, 0, 0.5]), 0)]}
    result = evaluate({'a': [(0, 0.9, box([0, 0, 0.5]))]}, gts, CLASSES[:1], thresholds=(0.5,))
    assert result.map[0.5] == pytest.approx(0.5)


def test_unknown_classes_and_scenes_are_rejected():
    gts = {'a': [(box([0, 0, 0.5]), 0)]}
    with pytest.raises(ArgumentError):
        evaluate({'a': [(5, 0.5, box([0, 0, 0.5]))]}, gts, CLASSES)
    with pytest.raises(ArgumentError):
        evaluate({'zzz': []}, gts, CLASSES)


def test_dropping_one_class_zeroes_its_ap_and_lowers_map(rng):
    detections, ground_truth = _noisy_fixture(rng)
    reference = evaluate(detections, ground_truth, CLASSES, thresholds=(0.25,))
    assert all(n > 0 for n in reference.num_gt)
    dropped = {scene_id: [d for d in dets if d[0] != 1] for scene_id, dets in detections.items()}
    result = evaluate(dropped, ground_truth, CLASSES, thresholds=(0.25,))
    assert result.ap[0.25][1] == 0.0
    assert result.ap[0.25][0] == reference.ap[0.25][0]
    assert result.ap[0.25][2] == reference.ap[0.25][2]
    assert result.map[0.25] == pytest.approx(reference.map[0.25] - reference.ap[0.25][1] / len(CLASSES), abs=1e-12)


# ── Reporting ────────────────────────────────────────────────────────────

def test_report_replaces_nan_with_null(tmp_path):
    gts = {'a': [(box([0, 0, 0.5]), 0)]}
    result = evaluate({'a': [(0, 0.9, box([0, 0, 0.5]))]}, gts, CLASSES)
    write_report(tmp_path / 'report.json', result, extra={'note': 'fixture'})
    document = json.loads((tmp_path / 'report.json').read_text())
    assert document['note'] == 'fixture'
    first = document['thresholds'][0]
    assert first['iou'] == 0.25 and first['map'] == 1.0
    assert first['ap'] == {'table': 1.0, 'chair': None, 'cabinet': None}


def test_table_lists_every_class_and_marks_missing_ones():
    result = EvalResult(CLASSES, [0.25], {0.25: [0.5, float('nan'), 1.0]}, {0.25: 0.75}, [2, 0, 1])
    text = format_table(CLASSES, {'baseline': result}, 0.25)
    lines = text.splitlines()
    assert lines[0] == 'mAP@0.25'
    for name in CLASSES:
        assert name in lines[1]
    assert lines[3].split() == ['baseline', '50.0', '-', '100.0', '75.0']


def test_mean_over_runs():
    a = EvalResult(CLASSES, [0.25], {0.25: [0.2, 0.4, 0.6]}, {0.25: 0.4}, [1, 1, 1])
    b = EvalResult(CLASSES, [0.25], {0.25: [0.4, 0.6, 0.8]}, {0.25: 0.6}, [1, 1, 1])
    mean = mean_result([a, b])
    np.testing.assert_allclose(mean.ap[0.25], [0.3, 0.5, 0.7])
    assert mean.map[0.25] == pytest.approx(0.5)
