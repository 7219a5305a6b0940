"""
玩具检测器训练 - 在合成形状数据集上训练 ToySSMNet（float32 训练，转 float64 用于攻击）
"""
from dataclasses import asdict, dataclass
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import box_convert, box_iou
from tqdm import tqdm

from src.core.types import GroundTruth
from src.data_loader.annotations import DatasetSample
from src.data_loader.synthetic_shapes import generate_shapes_dataset
from src.detector.offsets import encode_tensor
from src.detector.outputs import DetectorMetadata, StageKind
from src.detector.toy_ssm import (
    DEFAULT_ANCHOR_ASPECTS,
    DEFAULT_ANCHOR_SIZES,
    DEFAULT_STRIDE,
    TOY_NUM_OBJECT_CLASSES,
    ToySSM,
    ToySSMNet,
    build_anchors,
    normalize_pixels,
)
from src.evaluation.metrics import mean_average_precision

logger = logging.getLogger(__name__)

IGNORE_LABEL = -1


class TrainingDivergedError(RuntimeError):
    """训练损失出现 NaN / Inf"""


@dataclass(frozen=True)
class ToyTrainConfig:
    """玩具检测器训练参数"""

    num_images: int = 1200
    eval_images: int = 100
    epochs: int = 50
    batch_size: int = 32
    lr: float = 2e-3
    width: int = 64
    image_size: int = 96
    num_object_classes: int = TOY_NUM_OBJECT_CLASSES
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    neg_pos_ratio: int = 3

    def __post_init__(self):
        if self.num_images < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("num_images / epochs / batch_size 必须 >= 1")
        if not 0 < self.neg_iou <= self.pos_iou < 1:
            raise ValueError(f"需要 0 < neg_iou <= pos_iou < 1: {self.neg_iou}, {self.pos_iou}")


def match_anchors(
    anchors: torch.Tensor,
    gt: GroundTruth,
    num_object_classes: int,
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    锚框与真值匹配

    IoU ≥ pos_iou 为正样本，< neg_iou 为背景，介于两者之间忽略；
    每个真值 IoU 最大的锚框强制为正样本。

    Returns:
        (类别目标 M，背景 0 / 忽略 -1；偏移目标 M×4)
    """
    m = anchors.shape[0]
    labels = torch.zeros(m, dtype=torch.int64)
    targets = torch.zeros((m, 4), dtype=anchors.dtype)
    if len(gt) == 0:
        return labels, targets

    gt_boxes = torch.from_numpy(gt.boxes_array()).to(anchors.dtype)
    gt_labels = torch.from_numpy(gt.labels_array())
    if num_object_classes == 1:
        gt_labels = torch.ones_like(gt_labels)

    ious = box_iou(
        box_convert(anchors, in_fmt='cxcywh', out_fmt='xyxy'),
        box_convert(gt_boxes, in_fmt='cxcywh', out_fmt='xyxy'),
    )
    best_iou, best_gt = ious.max(dim=1)
    forced = ious.argmax(dim=0)
    best_gt[forced] = torch.arange(len(gt))
    best_iou[forced] = 1.0

    labels = gt_labels[best_gt].clone()
    labels[best_iou < pos_iou] = IGNORE_LABEL
    labels[best_iou < neg_iou] = 0
    targets = encode_tensor(anchors, gt_boxes[best_gt])
    return labels, targets


class ToyTrainer:
    """SSD 风格的训练器：交叉熵（难负样本挖掘）+ Smooth L1 回归"""

    def __init__(self, config: ToyTrainConfig, stage_kind: StageKind = 'single-stage', seed: int = 0):
        self.config = config
        self.stage_kind = stage_kind
        self.seed = seed
        num_classes = 1 if stage_kind == 'two-stage-rpn' else config.num_object_classes
        self.metadata = DetectorMetadata(
            num_object_classes=num_classes,
            stage_kind=stage_kind,
            input_dims=(config.image_size, config.image_size),
        )
        self.anchors = build_anchors(
            self.metadata.input_dims, DEFAULT_STRIDE, DEFAULT_ANCHOR_SIZES, DEFAULT_ANCHOR_ASPECTS
        ).float()

    def _encode_batch(self, samples: Sequence[DatasetSample]):
        images, labels, targets = [], [], []
        for sample in samples:
            pixels = sample.load_image().pixels
            images.append(torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1))
            lab, tgt = match_anchors(
                self.anchors, sample.gt, self.metadata.num_object_classes,
                self.config.pos_iou, self.config.neg_iou,
            )
            labels.append(lab)
            targets.append(tgt)
        return torch.stack(images), torch.stack(labels), torch.stack(targets)

    def _loss(
        self,
        logits: torch.Tensor,
        offsets: torch.Tensor,
        labels: torch.Tensor,
        targets: torch.Tensor,
    ) -> torch.Tensor:
        n, m, s = logits.shape
        pos = labels > 0
        num_pos = int(pos.sum())

        ce = F.cross_entropy(
            logits.reshape(-1, s), labels.clamp(min=0).reshape(-1), reduction='none'
        ).view(n, m)

        # 难负样本挖掘：每张图保留 neg_pos_ratio × 正样本数 个损失最大的背景锚框
        neg_loss = ce.detach().clone()
        neg_loss[labels != 0] = -math.inf
        rank = neg_loss.argsort(dim=1, descending=True).argsort(dim=1)
        per_image_pos = pos.sum(dim=1, keepdim=True)
        quota = torch.clamp(per_image_pos * self.config.neg_pos_ratio, min=self.config.neg_pos_ratio)
        neg = (rank < quota) & (labels == 0)

        denom = max(num_pos, 1)
        cls_loss = ce[pos | neg].sum() / denom
        reg_loss = F.smooth_l1_loss(offsets[pos], targets[pos], reduction='sum') / denom
        return cls_loss + reg_loss

    def train(self, samples: List[DatasetSample]) -> ToySSMNet:
        """训练并返回 float32 网络"""
        torch.manual_seed(self.seed)
        num_anchors = len(DEFAULT_ANCHOR_SIZES) * len(DEFAULT_ANCHOR_ASPECTS)
        net = ToySSMNet(self.metadata.num_scores, num_anchors, width=self.config.width).float()
        optimizer = torch.optim.Adam(net.parameters(), lr=self.config.lr)
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=self.config.epochs)

        images, labels, targets = self._encode_batch(samples)
        generator = torch.Generator().manual_seed(self.seed)
        logger.info(
            f"🔧 开始训练玩具检测器: {len(samples)} 张, {self.config.epochs} 轮, stage={self.stage_kind}"
        )

        net.train()
        progress = tqdm(range(self.config.epochs), desc="训练", disable=not logger.isEnabledFor(logging.INFO))
        for epoch in progress:
            order = torch.randperm(len(samples), generator=generator)
            epoch_loss = 0.0
            for start in range(0, len(samples), self.config.batch_size):
                idx = order[start:start + self.config.batch_size]
                logits, offsets = net(normalize_pixels(images[idx]))
                loss = self._loss(logits, offsets, labels[idx], targets[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"第 {epoch} 轮出现非有限损失: {loss.item()}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_loss += loss.item() * len(idx)
            scheduler.step()
            progress.set_postfix(loss=f"{epoch_loss / len(samples):.4f}")
            logger.debug(f"epoch {epoch}: loss={epoch_loss / len(samples):.4f}")

        net.eval()
        return net


def evaluate_clean_map(detector: ToySSM, samples: Sequence[DatasetSample], iou_thr: float = 0.5) -> float:
    """干净图像上的 mAP"""
    dets = [detector.detect(s.load_image()) for s in samples]
    gts = [s.gt.with_labels(1) if detector.metadata.num_object_classes == 1 and len(s.gt) else s.gt
           for s in samples]
    return mean_average_precision(dets, gts, iou_thr=iou_thr).mean_ap


def toy_ssm_build(
    seed: int,
    stage_kind: StageKind = 'single-stage',
    config: Optional[ToyTrainConfig] = None,
) -> ToySSM:
    """
    按种子生成数据并训练玩具检测器

    Args:
        seed: 训练数据与初始化的种子（不同种子得到不同检测器，用于迁移实验）
        stage_kind: 'single-stage' 或 'two-stage-rpn'（类别无关的候选框网络）
        config: 训练参数

    Returns:
        float64 的 ToySSM，info 中记录干净 mAP@0.5
    """
    config = config or ToyTrainConfig()
    trainer = ToyTrainer(config, stage_kind=stage_kind, seed=seed)
    train_set = generate_shapes_dataset(
        config.num_images, seed=seed, image_size=config.image_size,
        num_object_classes=config.num_object_classes, prefix='train',
    )
    net = trainer.train(train_set)

    detector = ToySSM(
        net,
        trainer.metadata,
        seed=seed,
        info={'train_config': asdict(config)},
    )
    holdout = generate_shapes_dataset(
        config.eval_images, seed=seed + 10_000, image_size=config.image_size,
        num_object_classes=config.num_object_classes, prefix='holdout',
    )
    clean_map = evaluate_clean_map(detector, holdout)
    detector.info['clean_map_50'] = clean_map
    logger.info(f"✅ 玩具检测器训练完成 (seed={seed}, stage={stage_kind}): 干净 mAP@0.5 = {clean_map:.4f}")
    return detector
