"""
评估指标 - PSNR、AP / mAP（全点插值）与背景误检计数
"""
from dataclasses import dataclass, field
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.core.geometry import ZERO_IOU_EPS, iou_matrix
from src.core.types import GroundTruth, ImageBuffer, PixelMask
from src.detector.outputs import ScoredDetection, detections_to_arrays

PSNR_PEAK = 255.0
# 掩码为空时 PSNR 无定义
PSNR_UNDEFINED = float('nan')
AP_INTERPOLATION = 'all-point'


def psnr(orig: ImageBuffer, pert: ImageBuffer, mask: Optional[PixelMask] = None) -> float:
    """
    掩码区域内的峰值信噪比 (dB)

    MSE 在掩码像素及三个通道上取平均；两图相同返回 +inf，掩码为空返回 NaN。
    """
    if orig.pixels.shape != pert.pixels.shape:
        raise ValueError(f"图像尺寸不一致: {orig.pixels.shape} vs {pert.pixels.shape}")
    if mask is None:
        mask = np.ones(orig.dims, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return PSNR_UNDEFINED
    diff = orig.pixels[mask] - pert.pixels[mask]
    mse = float(np.mean(diff ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PSNR_PEAK ** 2 / mse)


def rms_for_psnr(target_psnr: float) -> float:
    """PSNR 对应的逐像素均方根误差"""
    return PSNR_PEAK / (10.0 ** (target_psnr / 20.0))


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """全点插值 AP：精度包络线下的面积"""
    mrec = np.concatenate(([0.0], recalls, [1.0]))
    mpre = np.concatenate(([0.0], precisions, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


@dataclass
class MapResult:
    iou_threshold: float
    per_class_ap: Dict[int, float]
    mean_ap: float
    gt_counts: Dict[int, int] = field(default_factory=dict)
    interpolation: str = AP_INTERPOLATION


def _match_image(
    det_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    order: np.ndarray,
    iou_thr: float,
    gt_ignore: np.ndarray,
) -> np.ndarray:
    """
    单张图像单个类别的贪心匹配

    Returns:
        每条检测的状态：1 真正例，0 误检，-1 命中忽略目标（不计入）
    """
    status = np.zeros(len(det_boxes), dtype=np.int64)
    if len(gt_boxes) == 0:
        return status
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in order:
        best = int(np.argmax(ious[d]))
        if ious[d, best] < iou_thr:
            continue
        if gt_ignore[best]:
            status[d] = -1
        elif not taken[best]:
            taken[best] = True
            status[d] = 1
    return status


def mean_average_precision(
    dets: Sequence[Sequence[ScoredDetection]],
    gts: Sequence[GroundTruth],
    iou_thr: float = 0.5,
    ignore: Optional[Sequence[np.ndarray]] = None,
    classes: Optional[Sequence[int]] = None,
) -> MapResult:
    """
    VOC 风格的逐类别 AP 与 mAP

    检测按分数降序与真值贪心匹配，每个真值至多匹配一次，IoU ≥ iou_thr 为真正例。
    没有真值实例的类别不参与平均。

    Args:
        dets: 每张图像的检测列表
        gts: 每张图像的真值
        iou_thr: IoU 阈值
        ignore: 每张图像的真值忽略标记（分组评估时使用）
        classes: 参与评估的类别；缺省为真值中出现的全部类别
    """
    if len(dets) != len(gts):
        raise ValueError(f"检测与真值的图像数不一致: {len(dets)} vs {len(gts)}")
    if ignore is None:
        ignore = [np.zeros(len(g), dtype=bool) for g in gts]

    if classes is None:
        classes = sorted({label for g in gts for label in g.labels})

    per_class: Dict[int, float] = {}
    gt_counts: Dict[int, int] = {}
    for cls in classes:
        scores_all: List[float] = []
        status_all: List[int] = []
        n_gt = 0
        for img_dets, gt, ign in zip(dets, gts, ignore):
            boxes, labels, scores = detections_to_arrays(list(img_dets))
            sel = labels == cls
            d_boxes, d_scores = boxes[sel], scores[sel]
            g_sel = gt.labels_array() == cls if len(gt) else np.zeros(0, dtype=bool)
            g_boxes = gt.boxes_array()[g_sel]
            g_ign = np.asarray(ign, dtype=bool)[g_sel]
            n_gt += int((~g_ign).sum())
            order = np.argsort(-d_scores, kind='mergesort')
            status = _match_image(d_boxes, g_boxes, order, iou_thr, g_ign)
            scores_all.extend(d_scores.tolist())
            status_all.extend(status.tolist())

        gt_counts[cls] = n_gt
        if n_gt == 0:
            continue
        scores_arr = np.asarray(scores_all)
        status_arr = np.asarray(status_all, dtype=np.int64)
        keep = status_arr >= 0
        scores_arr, status_arr = scores_arr[keep], status_arr[keep]
        order = np.argsort(-scores_arr, kind='mergesort')
        tp = np.cumsum(status_arr[order] == 1)
        fp = np.cumsum(status_arr[order] == 0)
        if len(order) == 0:
            per_class[cls] = 0.0
            continue
        recalls = tp / n_gt
        precisions = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
        per_class[cls] = average_precision(recalls, precisions)

    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MapResult(iou_threshold=iou_thr, per_class_ap=per_class, mean_ap=mean_ap, gt_counts=gt_counts)


def count_background_false_positives(
    dets: Sequence[Sequence[ScoredDetection]],
    gts: Sequence[GroundTruth],
    score_threshold: float = 0.5,
    target: Optional[int] = None,
) -> List[int]:
    """
    每张图像中与所有真值零重叠、分数 ≥ score_threshold 的检测数量

    Args:
        target: 只统计该类别的误检
    """
    counts = []
    for img_dets, gt in zip(dets, gts):
        boxes, labels, scores = detections_to_arrays(list(img_dets))
        keep = scores >= score_threshold
        if target is not None:
            keep &= labels == target
        boxes = boxes[keep]
        if len(boxes) == 0:
            counts.append(0)
            continue
        if len(gt):
            overlap = iou_matrix(boxes, gt.boxes_array()).max(axis=1)
            counts.append(int((overlap < ZERO_IOU_EPS).sum()))
        else:
            counts.append(int(len(boxes)))
    return counts
