"""
背景补丁攻击主循环

梯度 -> 补丁几何（初始化 / 扩展）-> 掩码归一化更新 -> 裁剪 -> PSNR 与终止检查
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

from src.attack.patch_geometry import (
    GeometryConfig,
    ObjectGroup,
    cluster_objects,
    expand_patches,
    init_background_patches,
    init_patches,
)
from src.attack.losses import LossBreakdown
from src.core.geometry import masked_update, rasterize
from src.core.types import GroundTruth, ImageBuffer, PatchSet
from src.detector.outputs import LossWeights
from src.evaluation.metrics import psnr

if TYPE_CHECKING:
    from src.detector.interface import SingleShotDetector

logger = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-12


class TerminationReason(str, Enum):
    MAX_ITER = 'max_iter'
    NO_TRUE_POSITIVES = 'no_true_positives'
    PSNR_FLOOR = 'psnr_floor'


@dataclass(frozen=True)
class AttackConfig:
    """
    攻击配置

    Attributes:
        lam: 每次更新的 L2 范数 λ
        lam_reference_side: λ 对应的图像短边 (像素)；设置后实际步长为
            λ × 图像短边 / lam_reference_side，None 时步长恒为 λ
        max_iter: 最大迭代次数 T
        psnr_floor: PSNR 下限 ε (dB)；None 时按检测器类型取 35 / 30
        pseudo_gt: 是否用干净图像的检测结果作为真值
        pseudo_gt_score_floor: 伪真值的分数下限
        seed: 随机基线使用的种子
    """

    lam: float = 30.0
    lam_reference_side: Optional[float] = None
    max_iter: int = 250
    psnr_floor: Optional[float] = None
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    pseudo_gt: bool = False
    pseudo_gt_score_floor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam 必须为正: {self.lam}")
        if self.lam_reference_side is not None and not self.lam_reference_side > 0:
            raise ValueError(f"lam_reference_side 必须为正: {self.lam_reference_side}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter 必须 >= 1: {self.max_iter}")
        if self.psnr_floor is not None and not self.psnr_floor > 0:
            raise ValueError(f"psnr_floor 必须为正: {self.psnr_floor}")

    def step_norm(self, image_dims: Tuple[int, int]) -> float:
        """本图像上每次更新的 L2 范数"""
        if self.lam_reference_side is None:
            return self.lam
        return self.lam * min(image_dims) / self.lam_reference_side

    def resolve_psnr_floor(self, detector: "SingleShotDetector") -> float:
        if self.psnr_floor is not None:
            return self.psnr_floor
        return detector.metadata.default_psnr_floor

    def with_updates(self, **changes) -> "AttackConfig":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return AttackConfig(**values)


@dataclass(frozen=True)
class IterationRecord:
    """一次迭代的轨迹记录"""

    iteration: int
    breakdown: LossBreakdown
    psnr: float
    patch_areas: Tuple[float, ...]
    update_norm: float
    skipped: bool
    accepted: bool
    directions: Tuple[Optional[str], ...] = ()

    def to_dict(self) -> Dict:
        return {
            'iteration': self.iteration,
            **self.breakdown.to_dict(),
            'psnr': self.psnr,
            'patch_areas': list(self.patch_areas),
            'total_patch_area': float(sum(self.patch_areas)),
            'update_norm': self.update_norm,
            'skipped': self.skipped,
            'accepted': self.accepted,
            'directions': list(self.directions),
        }


@dataclass(frozen=True)
class AttackResult:
    """单张图像的攻击结果（生成后不可变）"""

    adversarial_image: ImageBuffer
    patches: PatchSet
    iterations_run: int
    final_psnr: float
    termination: TerminationReason
    trace: Tuple[IterationRecord, ...]
    gt: GroundTruth
    psnr_floor: float
    patch_shortfall: int = 0
    image_id: Optional[str] = None

    @property
    def mask(self) -> np.ndarray:
        return rasterize(self.patches, self.adversarial_image.dims)

    def summary(self) -> Dict:
        return {
            'image_id': self.image_id,
            'iterations_run': self.iterations_run,
            'final_psnr': self.final_psnr,
            'termination': self.termination.value,
            'num_patches': len(self.patches),
            'num_objects': len(self.gt),
            'patch_shortfall': self.patch_shortfall,
            'total_patch_area': self.patches.total_area(),
            'psnr_floor': self.psnr_floor,
        }


def normalize_perturbation(perturbation: np.ndarray, lam: float) -> Optional[np.ndarray]:
    """
    P̂ = (λ / ‖P‖₂) · P

    Returns:
        归一化后的扰动；‖P‖₂ < 1e-12 时返回 None（本次迭代跳过更新）
    """
    norm = float(np.linalg.norm(perturbation))
    if norm < ZERO_NORM_EPS:
        return None
    return perturbation * (lam / norm)


def pseudo_ground_truth(
    detector: "SingleShotDetector",
    img: ImageBuffer,
    score_floor: float = 0.5,
) -> GroundTruth:
    """干净图像上的检测结果（分数 ≥ score_floor）作为真值"""
    dets = [d for d in detector.detect(img, score_threshold=score_floor) if d.score >= score_floor]
    return GroundTruth(
        boxes=tuple(d.box for d in dets),
        labels=tuple(d.label for d in dets),
    )


def _initial_weights(weights: LossWeights) -> LossWeights:
    # t = 0 时补丁尚不存在，FPC 只在仅启用 FPC 时参与初始化
    if weights.uses_true_positives and weights.use_fpc:
        return weights.without_fpc()
    return weights


def run_attack(
    img: ImageBuffer,
    gt: GroundTruth,
    detector: "SingleShotDetector",
    cfg: AttackConfig,
    image_id: Optional[str] = None,
) -> AttackResult:
    """
    对单张图像生成背景补丁对抗样本

    Args:
        img: 干净图像
        gt: 真值（cfg.pseudo_gt 时忽略，改用检测结果）
        detector: 被攻击的单阶段模块
        cfg: 攻击配置

    Returns:
        AttackResult；违反 PSNR 下限的更新会被回滚，返回最后一次被接受的图像

    Raises:
        ValueError: 启用了 TPC/TPS 但没有目标
    """
    detector._check_dims(img.dims)
    weights = cfg.loss_weights
    dims = img.dims
    eps = cfg.resolve_psnr_floor(detector)
    step = cfg.step_norm(dims)

    if cfg.pseudo_gt:
        gt = pseudo_ground_truth(detector, img, cfg.pseudo_gt_score_floor)
        logger.debug(f"伪真值: {len(gt)} 个目标")
    if detector.metadata.num_object_classes == 1 and len(gt):
        gt = gt.with_labels(1)

    if weights.uses_true_positives and len(gt) == 0:
        raise ValueError(
            f"图像 {image_id} 没有目标，无法使用 {weights.combo_name}；请改用仅 FPC 模式"
        )

    current = img
    patches = PatchSet(patches=())
    groups: List[ObjectGroup] = []
    trace: List[IterationRecord] = []
    shortfall = 0
    termination = TerminationReason.MAX_ITER

    for t in range(cfg.max_iter):
        step_weights = _initial_weights(weights) if t == 0 else weights
        result = detector.objective(
            current.pixels, gt, patches, step_weights,
            require_patch_overlap=t > 0,
        )

        if weights.uses_true_positives and result.selections.tp.count == 0:
            termination = TerminationReason.NO_TRUE_POSITIVES
            logger.debug(f"t={t}: 没有剩余真正例，停止")
            break

        directions: Tuple[Optional[str], ...] = ()
        if t == 0:
            if weights.uses_true_positives:
                groups = cluster_objects(gt, dims, cfg.geometry)
                new_patches = init_patches(groups, gt, result.gradient, dims, cfg.geometry)
                shortfall = cfg.geometry.n_b * len(groups) - len(new_patches)
            else:
                new_patches = init_background_patches(gt, result.gradient, dims, cfg.geometry)
                shortfall = cfg.geometry.n_b - len(new_patches)
            if len(new_patches) == 0:
                logger.warning(f"⚠️  图像 {image_id} 没有可行的补丁位置，攻击未执行")
                break
        else:
            new_patches, decisions = expand_patches(
                patches, result.gradient, gt, dims, cfg.geometry, groups=groups
            )
            directions = tuple(d.direction for d in decisions)

        mask = rasterize(new_patches, dims)
        update = normalize_perturbation(result.gradient * mask[..., None], step)

        if update is None:
            record = IterationRecord(
                iteration=t,
                breakdown=result.breakdown,
                psnr=psnr(img, current, mask),
                patch_areas=tuple(new_patches.areas()),
                update_norm=0.0,
                skipped=True,
                accepted=True,
                directions=directions,
            )
            trace.append(record)
            patches = new_patches
            logger.debug(f"t={t}: 梯度范数为零，跳过更新")
            continue

        candidate = masked_update(current, update, mask)
        value = psnr(img, candidate, mask)
        accepted = value >= eps
        trace.append(IterationRecord(
            iteration=t,
            breakdown=result.breakdown,
            psnr=value,
            patch_areas=tuple(new_patches.areas()),
            update_norm=float(np.linalg.norm(update)),
            skipped=False,
            accepted=accepted,
            directions=directions,
        ))
        logger.debug(
            f"t={t}: loss={result.breakdown.total:.4f} "
            f"z={result.breakdown.active_tp_count} r={result.breakdown.active_fp_count} "
            f"psnr={value:.2f}dB"
        )

        if not accepted:
            termination = TerminationReason.PSNR_FLOOR
            break
        current = candidate
        patches = new_patches

    final_psnr = psnr(img, current, rasterize(patches, dims)) if len(patches) else math.inf
    attack = AttackResult(
        adversarial_image=current,
        patches=patches,
        iterations_run=len(trace),
        final_psnr=final_psnr,
        termination=termination,
        trace=tuple(trace),
        gt=gt,
        psnr_floor=eps,
        patch_shortfall=max(shortfall, 0),
        image_id=image_id,
    )
    logger.info(
        f"🎯 攻击完成 {image_id or ''}: {attack.iterations_run} 次迭代, "
        f"终止={termination.value}, PSNR={final_psnr:.2f}dB, 补丁={len(patches)}"
    )
    return attack


def patches_per_object(result: AttackResult) -> float:
    """每个目标分到的补丁数"""
    if len(result.gt) == 0:
        return float(len(result.patches))
    return len(result.patches) / len(result.gt)
