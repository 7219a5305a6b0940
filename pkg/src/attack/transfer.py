"""
迁移攻击 - 将一个检测器上优化得到的补丁像素回放到另一个检测器的输入上
"""
from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from src.attack.optimizer import AttackResult
from src.core.geometry import rasterize
from src.core.types import GroundTruth, ImageBuffer, PatchSet
from src.evaluation.metrics import mean_average_precision

if TYPE_CHECKING:
    from src.data_loader.annotations import DatasetSample
    from src.detector.interface import SingleShotDetector

logger = logging.getLogger(__name__)

CLEAN_ROW = 'clean'


def replay_patches(img: ImageBuffer, patches: PatchSet, source_result: AttackResult) -> ImageBuffer:
    """
    将 source_result 对抗图像中补丁区域的像素粘贴到 img 的相同位置，补丁外像素不变

    Raises:
        ValueError: 源图像与目标图像尺寸不一致，或补丁越界
    """
    source = source_result.adversarial_image
    if source.pixels.shape != img.pixels.shape:
        raise ValueError(f"源图像 {source.pixels.shape} 与目标图像 {img.pixels.shape} 尺寸不一致")
    mask = rasterize(patches, img.dims)
    pixels = img.copy_pixels()
    pixels[mask] = source.pixels[mask]
    return ImageBuffer(pixels)


def _eval_gt(gt: GroundTruth, detector: "SingleShotDetector") -> GroundTruth:
    if detector.metadata.num_object_classes == 1 and len(gt):
        return gt.with_labels(1)
    return gt


def transfer_matrix(
    samples: Sequence["DatasetSample"],
    detectors: Mapping[str, "SingleShotDetector"],
    attacks: Mapping[str, Sequence[Optional[AttackResult]]],
    iou_thr: float = 0.5,
    score_threshold: float = 0.05,
    nms_iou: float = 0.45,
) -> pd.DataFrame:
    """
    源检测器 × 目标检测器的 mAP 表

    Args:
        samples: 评估图像
        detectors: 名称 -> 检测器
        attacks: 源检测器名称 -> 与 samples 对齐的攻击结果（失败的图像为 None，按干净图像计）
        iou_thr: mAP 的 IoU 阈值

    Returns:
        行为源（另加 'clean' 行），列为目标的 DataFrame；对角线为白盒结果
    """
    sources = [name for name in detectors if name in attacks]
    rows: Dict[str, Dict[str, float]] = {}

    for source in [CLEAN_ROW] + sources:
        row: Dict[str, float] = {}
        for target_name, target in detectors.items():
            dets: List = []
            gts: List[GroundTruth] = []
            for idx, sample in enumerate(samples):
                img = sample.load_image()
                result = attacks[source][idx] if source != CLEAN_ROW else None
                if result is not None and len(result.patches):
                    img = replay_patches(img, result.patches, result)
                dets.append(target.detect(img, score_threshold=score_threshold, nms_iou=nms_iou))
                gts.append(_eval_gt(sample.gt, target))
            row[target_name] = mean_average_precision(dets, gts, iou_thr=iou_thr).mean_ap
        rows[source] = row
        logger.info(f"📊 迁移 {source}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items()))

    matrix = pd.DataFrame.from_dict(rows, orient='index')
    matrix.index.name = 'source'
    return matrix.astype(np.float64)
