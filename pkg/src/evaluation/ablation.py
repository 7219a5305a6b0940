"""
消融实验 - 补丁-目标距离扫描、尺寸分组评估
"""
from dataclasses import dataclass, field, replace
import logging
import math
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

from src.attack.optimizer import AttackConfig, run_attack
from src.core.types import GroundTruth, ImageBuffer
from src.detector.outputs import ScoredDetection
from src.evaluation.grouping import ScaleGroups
from src.evaluation.metrics import mean_average_precision
from src.evaluation.pool import run_batch

if TYPE_CHECKING:
    from src.data_loader.annotations import DatasetSample
    from src.detector.interface import SingleShotDetector

logger = logging.getLogger(__name__)


@dataclass
class SweepPoint:
    distance: float
    mean_ap: float
    num_patches: float
    infeasible_images: int = 0


@dataclass
class DistanceCurve:
    """mAP 随归一化补丁-目标距离变化的曲线"""

    points: List[SweepPoint] = field(default_factory=list)
    skipped: List[float] = field(default_factory=list)
    iou_threshold: float = 0.5

    def to_rows(self) -> List[Dict]:
        return [
            {
                'distance': p.distance,
                'mAP': p.mean_ap,
                'num_patches': p.num_patches,
                'infeasible_images': p.infeasible_images,
            }
            for p in self.points
        ]


def _validate_distances(distances: Sequence[float]):
    for d in distances:
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"归一化距离必须在 [0, 1] 内: {d}")


def _sweep_config(cfg: AttackConfig, distance: float) -> AttackConfig:
    # 距离扫描只考察 TPC / TPS
    weights = cfg.loss_weights
    if not weights.uses_true_positives:
        raise ValueError("距离扫描需要启用 TPC 或 TPS")
    return cfg.with_updates(
        geometry=replace(cfg.geometry, fixed_distance=distance),
        loss_weights=weights.without_fpc() if weights.use_fpc else weights,
    )


def _eval_gt(gt: GroundTruth, detector: "SingleShotDetector") -> GroundTruth:
    if detector.metadata.num_object_classes == 1 and len(gt):
        return gt.with_labels(1)
    return gt


def distance_sweep(
    img: ImageBuffer,
    gt: GroundTruth,
    detector: "SingleShotDetector",
    cfg: AttackConfig,
    distances: Sequence[float],
    iou_thr: float = 0.5,
) -> DistanceCurve:
    """
    单张图像的距离扫描：补丁与所属目标的间距固定为 d × 目标最长边

    放不下任何补丁的距离被跳过并记录。
    """
    _validate_distances(distances)
    curve = DistanceCurve(iou_threshold=iou_thr)
    for d in distances:
        result = run_attack(img, gt, detector, _sweep_config(cfg, d))
        if len(result.patches) == 0:
            logger.warning(f"⚠️  距离 {d:.2f} 无可行补丁，跳过")
            curve.skipped.append(d)
            continue
        dets = detector.detect(result.adversarial_image)
        value = mean_average_precision([dets], [_eval_gt(gt, detector)], iou_thr=iou_thr).mean_ap
        curve.points.append(SweepPoint(distance=d, mean_ap=value, num_patches=len(result.patches)))
    return curve


def distance_sweep_dataset(
    samples: Sequence["DatasetSample"],
    detector: "SingleShotDetector",
    cfg: AttackConfig,
    distances: Sequence[float],
    iou_thr: float = 0.5,
    workers: int = 1,
    score_threshold: float = 0.05,
    nms_iou: float = 0.45,
) -> DistanceCurve:
    """
    数据集级距离扫描：每个距离下整体 mAP

    某张图像在该距离下放不下补丁时按干净图像评估并计数；所有图像都不可行时跳过该距离。
    """
    _validate_distances(distances)
    curve = DistanceCurve(iou_threshold=iou_thr)
    gts = [_eval_gt(s.gt, detector) for s in samples]

    for d in distances:
        sweep_cfg = _sweep_config(cfg, d)

        def attack_one(sample: "DatasetSample"):
            return run_attack(sample.load_image(), sample.gt, detector, sweep_cfg, image_id=sample.image_id)

        results, _ = run_batch(
            attack_one, samples, workers=workers, desc=f"距离 {d:.2f}",
            names=[s.image_id for s in samples],
        )
        feasible = [r for r in results if r is not None and len(r.patches)]
        if not feasible:
            logger.warning(f"⚠️  距离 {d:.2f} 在所有图像上都无可行补丁，跳过")
            curve.skipped.append(d)
            continue

        dets: List[List[ScoredDetection]] = []
        for sample, result in zip(samples, results):
            img = result.adversarial_image if result is not None and len(result.patches) else sample.load_image()
            dets.append(detector.detect(img, score_threshold=score_threshold, nms_iou=nms_iou))
        value = mean_average_precision(dets, gts, iou_thr=iou_thr).mean_ap
        curve.points.append(SweepPoint(
            distance=d,
            mean_ap=value,
            num_patches=sum(len(r.patches) for r in feasible) / len(feasible),
            infeasible_images=len(samples) - len(feasible),
        ))
        logger.info(f"📊 距离 {d:.2f}: mAP@{iou_thr} = {value:.4f}")
    return curve


def relative_drop(clean: float, attacked: float) -> float:
    if clean <= 0:
        return math.nan
    return (clean - attacked) / clean


def scale_group_ablation(
    gts: Sequence[GroundTruth],
    clean_dets: Sequence[Sequence[ScoredDetection]],
    attacked_dets: Sequence[Sequence[ScoredDetection]],
    groups: ScaleGroups,
    iou_thr: float = 0.5,
    classes: Optional[Sequence[int]] = None,
) -> List[Dict]:
    """
    每个尺寸组的干净 / 攻击后 mAP 与相对下降

    只评估组内目标，命中其他组目标的检测被忽略。
    """
    rows = []
    for g in range(groups.count):
        ignore = groups.ignore_masks(g)
        clean = mean_average_precision(clean_dets, gts, iou_thr=iou_thr, ignore=ignore, classes=classes)
        attacked = mean_average_precision(attacked_dets, gts, iou_thr=iou_thr, ignore=ignore, classes=classes)
        lo, hi = groups.area_ranges[g]
        rows.append({
            'group': groups.label(g),
            'num_objects': groups.sizes[g],
            'min_area': lo,
            'max_area': hi,
            'clean_mAP': clean.mean_ap,
            'attacked_mAP': attacked.mean_ap,
            'relative_drop': relative_drop(clean.mean_ap, attacked.mean_ap),
        })
        logger.info(
            f"📊 {groups.label(g)}: clean={clean.mean_ap:.4f} attacked={attacked.mean_ap:.4f}"
        )
    return rows
