"""
攻击损失 - TPC / TPS / FPC 三项损失及其检测选择 (z_j, r_j, ĉ, c′)
"""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from src.core.geometry import ZERO_IOU_EPS, iou_matrix
from src.core.types import GroundTruth, PatchSet
from src.detector.offsets import encode_tensor
from src.detector.outputs import LossWeights, SsmOutputs

TP_IOU_THRESHOLD = 0.5
TP_SCORE_THRESHOLD = 0.1
FP_PATCH_IOU_THRESHOLD = 0.1
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TpSelection:
    """
    真正例选择

    flags: z_j；matched_gt / correct_class / runner_up 未匹配时为 -1
    """

    flags: np.ndarray
    matched_gt: np.ndarray
    matched_iou: np.ndarray
    correct_class: np.ndarray
    runner_up: np.ndarray

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    @classmethod
    def empty(cls, m: int) -> "TpSelection":
        minus = np.full(m, -1, dtype=np.int64)
        return cls(
            flags=np.zeros(m, dtype=bool),
            matched_gt=minus.copy(),
            matched_iou=np.zeros(m),
            correct_class=minus.copy(),
            runner_up=minus.copy(),
        )


@dataclass(frozen=True)
class FpSelection:
    """误检选择：flags 为 r_j，fp_class 为 c′_j"""

    flags: np.ndarray
    fp_class: np.ndarray

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    @classmethod
    def empty(cls, m: int) -> "FpSelection":
        return cls(flags=np.zeros(m, dtype=bool), fp_class=np.full(m, -1, dtype=np.int64))


@dataclass(frozen=True)
class Selections:
    tp: TpSelection
    fp: FpSelection


@dataclass(frozen=True)
class LossBreakdown:
    """各损失项的取值，total 为启用项的加权和"""

    tpc: float
    tps: float
    fpc: float
    total: float
    active_tp_count: int
    active_fp_count: int
    runner_up_classes: Tuple[int, ...] = ()
    fp_classes: Tuple[int, ...] = ()

    def to_dict(self) -> Dict:
        return {
            'tpc': self.tpc,
            'tps': self.tps,
            'fpc': self.fpc,
            'total': self.total,
            'active_tp_count': self.active_tp_count,
            'active_fp_count': self.active_fp_count,
            'runner_up_classes': list(self.runner_up_classes),
            'fp_classes': list(self.fp_classes),
        }


def select_true_positives(out: SsmOutputs, gt: GroundTruth) -> TpSelection:
    """
    选择待攻击的真正例

    每条检测匹配 IoU 最大的真值框（并列取下标最小者），
    z_j = 1 当且仅当匹配 IoU > 0.5 且正确类别分数 > 0.1。
    两阶段 RPN (C = 1) 时正确类别恒为 1 (object)。
    """
    m = len(out)
    if len(gt) == 0 or m == 0:
        return TpSelection.empty(m)

    num_classes = out.num_object_classes
    labels = gt.labels_array()
    if num_classes > 1 and labels.max() > num_classes:
        raise ValueError(f"真值类别 {labels.max()} 超出检测器类别数 {num_classes}")

    ious = iou_matrix(out.boxes, gt.boxes_array())
    matched = np.argmax(ious, axis=1)
    best = ious[np.arange(m), matched]
    has_match = best > ZERO_IOU_EPS

    gt_class = labels[matched] if num_classes > 1 else np.ones(m, dtype=np.int64)
    correct = np.where(has_match, gt_class, -1)

    rows = np.arange(m)
    safe_correct = np.clip(correct, 0, None)
    score_on_correct = out.scores[rows, safe_correct]
    flags = has_match & (best > TP_IOU_THRESHOLD) & (score_on_correct > TP_SCORE_THRESHOLD)

    others = np.array(out.scores, copy=True)
    others[rows, safe_correct] = -np.inf
    runner_up = np.where(has_match, np.argmax(others, axis=1), -1)

    return TpSelection(
        flags=flags,
        matched_gt=np.where(has_match, matched, -1),
        matched_iou=np.where(has_match, best, 0.0),
        correct_class=correct,
        runner_up=runner_up,
    )


def select_false_positives(
    out: SsmOutputs,
    gt: GroundTruth,
    patches: PatchSet,
    target: Optional[int] = None,
    require_patch_overlap: bool = True,
) -> FpSelection:
    """
    选择待注入的背景误检

    r_j = 1 当且仅当检测与所有真值框零重叠，且与某个补丁的 IoU > 0.1。
    c′_j 为指定的目标类别，否则为分数最高的物体类别。

    Args:
        require_patch_overlap: False 时放宽补丁条件（仅用于无目标时的补丁初始化）
    """
    m = len(out)
    num_classes = out.num_object_classes
    if target is not None and not 1 <= target <= num_classes:
        raise ValueError(f"目标类别 {target} 不在 [1, {num_classes}] 内")

    if len(gt):
        gt_iou = iou_matrix(out.boxes, gt.boxes_array()).max(axis=1)
    else:
        gt_iou = np.zeros(m)
    background = gt_iou < ZERO_IOU_EPS

    if require_patch_overlap:
        if len(patches) == 0:
            return FpSelection.empty(m)
        patch_iou = iou_matrix(out.boxes, patches.boxes_array()).max(axis=1)
        flags = background & (patch_iou > FP_PATCH_IOU_THRESHOLD)
    else:
        flags = background

    if target is not None:
        fp_class = np.full(m, target, dtype=np.int64)
    else:
        fp_class = 1 + np.argmax(out.scores[:, 1:], axis=1)
    return FpSelection(flags=flags, fp_class=fp_class.astype(np.int64))


def _neg_log(values: torch.Tensor) -> torch.Tensor:
    return -torch.log(torch.clamp(values, min=LOG_CLAMP)).sum()


def tpc_term(scores: torch.Tensor, sel: TpSelection) -> torch.Tensor:
    """L_tpc = −Σ z_j log s^{ĉ_j}_j（张量版本，可求导）"""
    idx = sel.indices
    if idx.size == 0:
        return scores.sum() * 0.0
    rows = torch.from_numpy(idx)
    cols = torch.from_numpy(sel.runner_up[idx])
    return _neg_log(scores[rows, cols])


def tps_term(
    offsets: torch.Tensor,
    anchors: torch.Tensor,
    sel: TpSelection,
    gt: GroundTruth,
) -> torch.Tensor:
    """L_shape = exp(−Σ z_j ‖Δ_j − Δ̄_j‖²)（张量版本，可求导）"""
    idx = sel.indices
    if idx.size == 0:
        return offsets.sum() * 0.0 + 1.0
    rows = torch.from_numpy(idx)
    gt_boxes = torch.from_numpy(gt.boxes_array()[sel.matched_gt[idx]]).to(offsets.dtype)
    true_offsets = encode_tensor(anchors[rows].to(offsets.dtype), gt_boxes)
    squared = ((offsets[rows] - true_offsets) ** 2).sum()
    return torch.exp(-squared)


def fpc_term(scores: torch.Tensor, sel: FpSelection) -> torch.Tensor:
    """L_fpc = −Σ r_j log s^{c′_j}_j（张量版本，可求导）"""
    idx = sel.indices
    if idx.size == 0:
        return scores.sum() * 0.0
    rows = torch.from_numpy(idx)
    cols = torch.from_numpy(sel.fp_class[idx])
    return _neg_log(scores[rows, cols])


def tpc_loss(out: SsmOutputs, sel: TpSelection) -> float:
    return float(tpc_term(torch.from_numpy(np.array(out.scores)), sel))


def tps_loss(out: SsmOutputs, sel: TpSelection, gt: GroundTruth) -> float:
    return float(tps_term(
        torch.from_numpy(np.array(out.offsets)),
        torch.from_numpy(np.array(out.anchors)),
        sel,
        gt,
    ))


def fpc_loss(out: SsmOutputs, sel: FpSelection) -> float:
    return float(fpc_term(torch.from_numpy(np.array(out.scores)), sel))


def compute_selections(
    out: SsmOutputs,
    gt: GroundTruth,
    patches: PatchSet,
    weights: LossWeights,
    require_patch_overlap: bool = True,
) -> Selections:
    """每次迭代根据当前前向结果重新计算 z / ĉ / r / c′"""
    return Selections(
        tp=select_true_positives(out, gt),
        fp=select_false_positives(
            out, gt, patches,
            target=weights.target_class,
            require_patch_overlap=require_patch_overlap,
        ),
    )


def objective_terms(
    scores: torch.Tensor,
    offsets: torch.Tensor,
    anchors: torch.Tensor,
    gt: GroundTruth,
    weights: LossWeights,
    selections: Selections,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    计算加权总损失张量及其分项

    三项总是全部计算（用于记录轨迹），total 只累加启用的项。
    """
    tpc = tpc_term(scores, selections.tp)
    tps = tps_term(offsets, anchors, selections.tp, gt)
    fpc = fpc_term(scores, selections.fp)

    total = scores.sum() * 0.0
    if weights.use_tpc:
        total = total + weights.tpc_weight * tpc
    if weights.use_tps:
        total = total + weights.tps_weight * tps
    if weights.use_fpc:
        total = total + weights.fpc_weight * fpc

    tp_idx = selections.tp.indices
    fp_idx = selections.fp.indices
    breakdown = LossBreakdown(
        tpc=float(tpc.detach()),
        tps=float(tps.detach()),
        fpc=float(fpc.detach()),
        total=float(total.detach()),
        active_tp_count=selections.tp.count,
        active_fp_count=selections.fp.count,
        runner_up_classes=tuple(int(c) for c in selections.tp.runner_up[tp_idx]),
        fp_classes=tuple(int(c) for c in selections.fp.fp_class[fp_idx]),
    )
    return total, breakdown


def is_active(weights: LossWeights, selections: Selections) -> bool:
    """是否至少有一个启用的损失项拥有非空选择"""
    if weights.uses_true_positives and selections.tp.count > 0:
        return True
    return weights.use_fpc and selections.fp.count > 0


def total_loss(
    out: SsmOutputs,
    gt: GroundTruth,
    patches: PatchSet,
    weights: LossWeights,
    tp_selection: Optional[TpSelection] = None,
    fp_selection: Optional[FpSelection] = None,
) -> LossBreakdown:
    """
    L_tpc + L_shape + L_fpc（仅启用项，默认单位权重）

    Args:
        tp_selection / fp_selection: 可选的预先计算好的选择，缺省时按当前输出重新选择
    """
    selections = Selections(
        tp=tp_selection if tp_selection is not None else select_true_positives(out, gt),
        fp=fp_selection if fp_selection is not None else select_false_positives(
            out, gt, patches, target=weights.target_class
        ),
    )
    _, breakdown = objective_terms(
        torch.from_numpy(np.array(out.scores)),
        torch.from_numpy(np.array(out.offsets)),
        torch.from_numpy(np.array(out.anchors)),
        gt,
        weights,
        selections,
    )
    return breakdown
