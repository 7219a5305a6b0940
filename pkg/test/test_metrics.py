import math

import numpy as np
import pytest

from src.core.types import BoxCWH, GroundTruth, ImageBuffer
from src.detector.outputs import ScoredDetection
from src.evaluation.metrics import (
    average_precision,
    count_background_false_positives,
    mean_average_precision,
    psnr,
)


def det(x1, y1, x2, y2, score, label=1):
    return ScoredDetection(box=BoxCWH.from_xyxy(x1, y1, x2, y2), label=label, score=score)


def gt_of(*boxes, labels=None):
    labels = labels or tuple(1 for _ in boxes)
    return GroundTruth(boxes=tuple(BoxCWH.from_xyxy(*b) for b in boxes), labels=tuple(labels))


def test_psnr_identical_is_infinite():
    img = ImageBuffer(np.full((8, 8, 3), 50.0))
    assert math.isinf(psnr(img, img))


def test_psnr_one_level_difference():
    a = ImageBuffer(np.full((8, 8, 3), 50.0))
    b = ImageBuffer(np.full((8, 8, 3), 51.0))
    assert psnr(a, b) == pytest.approx(48.1308, abs=1e-4)
    assert psnr(b, a) == pytest.approx(psnr(a, b))


def test_psnr_full_scale_difference_is_zero():
    a = ImageBuffer(np.zeros((4, 4, 3)))
    b = ImageBuffer(np.full((4, 4, 3), 255.0))
    assert psnr(a, b) == pytest.approx(0.0)


def test_psnr_uses_only_masked_pixels():
    a = ImageBuffer(np.full((8, 8, 3), 50.0))
    pixels = np.full((8, 8, 3), 50.0)
    pixels[:2, :2] = 51.0
    pixels[6:, 6:] = 0.0
    mask = np.zeros((8, 8), dtype=bool)
    mask[:2, :2] = True
    assert psnr(a, ImageBuffer(pixels), mask) == pytest.approx(48.1308, abs=1e-4)


def test_psnr_empty_mask_is_undefined():
    img = ImageBuffer(np.zeros((4, 4, 3)))
    assert math.isnan(psnr(img, img, np.zeros((4, 4), dtype=bool)))


def test_map_fixture_five_sixths():
    gts = [gt_of((0, 0, 10, 10), (20, 20, 30, 30))]
    dets = [[
        det(0, 0, 10, 10, 0.9),
        det(50, 50, 60, 60, 0.8),
        det(20, 20, 30, 30, 0.7),
    ]]
    result = mean_average_precision(dets, gts, iou_thr=0.5)
    assert result.mean_ap == pytest.approx(0.8333, abs=1e-4)
    assert result.per_class_ap[1] == pytest.approx(5 / 6)
    assert result.gt_counts[1] == 2


def test_map_perfect_and_empty():
    gts = [gt_of((0, 0, 10, 10)), gt_of((5, 5, 25, 25), labels=(2,))]
    perfect = [[det(0, 0, 10, 10, 0.9)], [det(5, 5, 25, 25, 0.8, label=2)]]
    assert mean_average_precision(perfect, gts).mean_ap == pytest.approx(1.0)
    assert mean_average_precision([[], []], gts).mean_ap == 0.0


def test_map_duplicate_detection_is_false_positive():
    gts = [gt_of((0, 0, 10, 10))]
    dets = [[det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]]
    assert mean_average_precision(dets, gts).mean_ap == pytest.approx(1.0)
    dets = [[det(0, 0, 10, 10, 0.8), det(0, 0, 10, 10, 0.9)]]
    assert mean_average_precision(dets, gts).mean_ap == pytest.approx(1.0)


def test_map_ignores_classes_without_instances():
    gts = [gt_of((0, 0, 10, 10))]
    dets = [[det(0, 0, 10, 10, 0.9), det(40, 40, 50, 50, 0.95, label=3)]]
    result = mean_average_precision(dets, gts, classes=[1, 2, 3])
    assert set(result.per_class_ap) == {1}
    assert result.mean_ap == pytest.approx(1.0)


def test_map_ignore_mask_drops_objects_and_their_matches():
    gts = [gt_of((0, 0, 10, 10), (20, 20, 30, 30))]
    dets = [[det(20, 20, 30, 30, 0.9), det(0, 0, 10, 10, 0.5)]]
    ignore = [np.array([False, True])]
    result = mean_average_precision(dets, gts, ignore=ignore)
    assert result.gt_counts[1] == 1
    assert result.mean_ap == pytest.approx(1.0)


def test_map_rejects_length_mismatch():
    with pytest.raises(ValueError):
        mean_average_precision([[]], [GroundTruth(), GroundTruth()])


def _brute_force_ap(dets, gt, iou_thr):
    """按分数截断逐个枚举 (recall, precision) 点，再取精度包络面积"""
    def box_iou(a, b):
        ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
        iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
        inter = ix * iy
        return inter / (a.area + b.area - inter)

    ranked = sorted(dets, key=lambda d: -d.score)
    taken = set()
    hits = []
    for d in ranked:
        ious = [box_iou(d.box, g) for g in gt.boxes]
        best = max(range(len(ious)), key=lambda i: ious[i])
        if ious[best] >= iou_thr and best not in taken:
            taken.add(best)
            hits.append(True)
        else:
            hits.append(False)

    points = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        points.append((tp / len(gt), tp / k))

    ap, prev_recall = 0.0, 0.0
    for k, (recall, _) in enumerate(points):
        if recall > prev_recall:
            ap += (recall - prev_recall) * max(p for _, p in points[k:])
            prev_recall = recall
    return ap


@pytest.mark.parametrize('seed', range(8))
def test_map_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(3):
        x, y = rng.uniform(0, 80, size=2)
        boxes.append((x, y, x + rng.uniform(8, 20), y + rng.uniform(8, 20)))
    gt = gt_of(*boxes)

    dets = []
    scores = rng.permutation(np.linspace(0.1, 0.9, 6))
    for score in scores:
        x1, y1, x2, y2 = boxes[rng.integers(0, 3)]
        jitter = rng.normal(0, 3, size=4)
        x1, y1 = x1 + jitter[0], y1 + jitter[1]
        x2, y2 = max(x2 + jitter[2], x1 + 1), max(y2 + jitter[3], y1 + 1)
        dets.append(det(x1, y1, x2, y2, float(score)))

    expected = _brute_force_ap(dets, gt, 0.5)
    assert mean_average_precision([dets], [gt], iou_thr=0.5).mean_ap == pytest.approx(expected, abs=1e-9)


def test_average_precision_envelope():
    recalls = np.array([0.5, 0.5, 1.0])
    precisions = np.array([1.0, 0.5, 2 / 3])
    assert average_precision(recalls, precisions) == pytest.approx(5 / 6)


def test_background_false_positive_counts():
    gts = [gt_of((0, 0, 10, 10))]
    dets = [[
        det(50, 50, 60, 60, 0.6, label=2),
        det(70, 70, 80, 80, 0.4, label=2),
        det(5, 5, 15, 15, 0.9, label=1),
        det(30, 30, 40, 40, 0.7, label=1),
    ]]
    assert count_background_false_positives(dets, gts) == [2]
    assert count_background_false_positives(dets, gts, target=2) == [1]
    assert count_background_false_positives(dets, [GroundTruth()]) == [3]
