"""
检测器接口 - 任意单阶段模块 (SSM) 的适配契约：前向、输入梯度与后处理

真实检测器只需继承 SingleShotDetector 并实现 metadata / anchors / predict，
其余能力（softmax、解码、损失梯度、NMS）由基类提供。
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
import logging
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import batched_nms, box_convert

from src.attack import losses
from src.core.types import BoxCWH, GroundTruth, ImageBuffer, PatchSet
from src.detector.offsets import decode_tensor
from src.detector.outputs import (
    DetectorMetadata,
    LossWeights,
    NoActiveLossError,
    ScoredDetection,
    SsmOutputs,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveResult:
    """一次损失评估的结果"""

    breakdown: losses.LossBreakdown
    selections: losses.Selections
    outputs: SsmOutputs
    gradient: Optional[np.ndarray] = None  # H×W×3
    active: bool = True


class SingleShotDetector(ABC):
    """
    单阶段模块适配器基类

    前向与梯度计算不修改权重，同一实例可被多个线程只读共享。
    """

    @property
    @abstractmethod
    def metadata(self) -> DetectorMetadata:
        """检测器元信息"""

    @property
    @abstractmethod
    def anchors(self) -> torch.Tensor:
        """M×4 锚框 (cx, cy, w, h)，float64"""

    @abstractmethod
    def predict(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        原始网络输出

        Args:
            x: 1×3×H×W，像素取值 [0, 255]，float64

        Returns:
            (logits M×(C+1), offsets M×4)
        """

    def _check_dims(self, dims: Tuple[int, int]):
        if tuple(dims) != tuple(self.metadata.input_dims):
            raise ValueError(
                f"输入尺寸 {tuple(dims)} 与检测器尺寸 {tuple(self.metadata.input_dims)} 不一致，"
                "请在攻击前完成缩放"
            )

    @staticmethod
    def _to_tensor(pixels: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.array(pixels, dtype=np.float64)).permute(2, 0, 1).unsqueeze(0)

    def _outputs(
        self,
        scores: torch.Tensor,
        offsets: torch.Tensor,
        image_id: Optional[str] = None,
    ) -> SsmOutputs:
        anchors = self.anchors
        boxes = decode_tensor(anchors, offsets.detach())
        return SsmOutputs(
            scores=scores.detach().numpy(),
            boxes=boxes.numpy(),
            anchors=anchors.numpy(),
            offsets=offsets.detach().numpy(),
            source_image_id=image_id,
        )

    def forward(self, img: ImageBuffer, image_id: Optional[str] = None) -> SsmOutputs:
        """单次前向传播，返回 softmax 后的分数与解码框"""
        self._check_dims(img.dims)
        with torch.no_grad():
            logits, offsets = self.predict(self._to_tensor(img.pixels))
            scores = F.softmax(logits, dim=-1)
        return self._outputs(scores, offsets, image_id)

    def objective(
        self,
        pixels: np.ndarray,
        gt: GroundTruth,
        patches: PatchSet,
        weights: LossWeights,
        selections: Optional[losses.Selections] = None,
        with_grad: bool = True,
        require_patch_overlap: bool = True,
    ) -> ObjectiveResult:
        """
        在给定像素上评估攻击损失（可选求输入梯度）

        Args:
            pixels: H×W×3 像素数组（不要求位于 [0, 255]，便于有限差分检查）
            selections: 冻结的选择；缺省时按当前前向结果重新选择
            with_grad: 是否返回对全图的梯度
            require_patch_overlap: 见 losses.select_false_positives

        Returns:
            ObjectiveResult
        """
        pixels = np.asarray(pixels, dtype=np.float64)
        self._check_dims(pixels.shape[:2])

        x = self._to_tensor(pixels)
        if with_grad:
            x.requires_grad_(True)
        with torch.set_grad_enabled(with_grad):
            logits, offsets = self.predict(x)
            scores = F.softmax(logits, dim=-1)
            outputs = self._outputs(scores, offsets)
            if selections is None:
                selections = losses.compute_selections(
                    outputs, gt, patches, weights, require_patch_overlap=require_patch_overlap
                )
            total, breakdown = losses.objective_terms(
                scores, offsets, self.anchors, gt, weights, selections
            )

        gradient = None
        if with_grad:
            (grad,) = torch.autograd.grad(total, x, allow_unused=True)
            if grad is None:
                gradient = np.zeros_like(pixels)
            else:
                gradient = grad[0].permute(1, 2, 0).numpy().copy()

        return ObjectiveResult(
            breakdown=breakdown,
            selections=selections,
            outputs=outputs,
            gradient=gradient,
            active=losses.is_active(weights, selections),
        )

    def input_gradient(
        self,
        img: ImageBuffer,
        gt: GroundTruth,
        patches: PatchSet,
        weights: LossWeights,
    ) -> np.ndarray:
        """
        总损失对输入图像的梯度 (H×W×3)，掩码在调用方施加

        Raises:
            NoActiveLossError: 所有启用损失项的选择都为空
        """
        result = self.objective(img.pixels, gt, patches, weights)
        if not result.active:
            raise NoActiveLossError("没有可用的损失项 (z 与 r 均为空)", result.breakdown)
        return result.gradient

    def detect(
        self,
        img: ImageBuffer,
        score_threshold: float = 0.05,
        nms_iou: float = 0.45,
        max_detections: int = 100,
    ) -> List[ScoredDetection]:
        """
        最终检测结果：逐类别阈值过滤 + NMS，用于 mAP 与伪真值
        """
        out = self.forward(img)
        num_classes = out.num_object_classes
        scores = out.scores[:, 1:]
        det_idx, cls_idx = np.nonzero(scores >= score_threshold)
        if det_idx.size == 0:
            return []

        boxes_cwh = torch.from_numpy(np.array(out.boxes[det_idx]))
        boxes_xyxy = box_convert(boxes_cwh, in_fmt='cxcywh', out_fmt='xyxy')
        cand_scores = torch.from_numpy(scores[det_idx, cls_idx].copy())
        keep = batched_nms(boxes_xyxy, cand_scores, torch.from_numpy(cls_idx), nms_iou)
        keep = keep[:max_detections].numpy()

        results = []
        for k in keep:
            x1, y1, x2, y2 = boxes_xyxy[k].tolist()
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                continue
            results.append(ScoredDetection(
                box=BoxCWH.from_xyxy(x1, y1, x2, y2),
                label=int(cls_idx[k]) + 1 if num_classes > 1 else 1,
                score=float(cand_scores[k]),
            ))
        return results
