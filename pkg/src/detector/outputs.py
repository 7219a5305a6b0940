"""
检测器输出类型 - 元信息、单次前向的检测结果与损失开关
"""
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np

from src.core.types import BoxCWH

StageKind = Literal['two-stage-rpn', 'single-stage']

BACKGROUND_INDEX = 0

LOSS_COMBOS = ('tpc', 'tps', 'tpc+tps', 'fpc', 'tpc+tps+fpc')


class NoActiveLossError(RuntimeError):
    """所有启用的损失项的选择集都为空，无法求梯度"""

    def __init__(self, message: str, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass(frozen=True)
class DetectorMetadata:
    """单阶段模块 (SSM) 的元信息"""

    num_object_classes: int
    stage_kind: StageKind
    input_dims: Tuple[int, int]  # (height, width)
    background_index: int = BACKGROUND_INDEX

    def __post_init__(self):
        if self.num_object_classes < 1:
            raise ValueError(f"num_object_classes 必须 >= 1: {self.num_object_classes}")
        if self.stage_kind not in ('two-stage-rpn', 'single-stage'):
            raise ValueError(f"未知的 stage_kind: {self.stage_kind}")
        if self.stage_kind == 'two-stage-rpn' and self.num_object_classes != 1:
            raise ValueError("两阶段 RPN 只区分 object/background，num_object_classes 必须为 1")

    @property
    def num_scores(self) -> int:
        return self.num_object_classes + 1

    @property
    def default_psnr_floor(self) -> float:
        return 35.0 if self.stage_kind == 'two-stage-rpn' else 30.0


@dataclass(frozen=True)
class DetectionRecord:
    """一条检测：softmax 后的 C+1 维分数、解码框、锚框与预测偏移"""

    scores: np.ndarray
    box: BoxCWH
    anchor: BoxCWH
    pred_offsets: Tuple[float, float, float, float]

    @property
    def top_class(self) -> int:
        return int(np.argmax(self.scores))


@dataclass(frozen=True)
class SsmOutputs:
    """
    一次前向传播的 M 条检测（以数组形式保存）

    scores: M×(C+1)，boxes / anchors / offsets: M×4，框均为 (cx, cy, w, h)
    """

    scores: np.ndarray
    boxes: np.ndarray
    anchors: np.ndarray
    offsets: np.ndarray
    source_image_id: Optional[str] = None

    def __post_init__(self):
        # 保存只读副本，调用方传入的数组保持可写
        for name in ('scores', 'boxes', 'anchors', 'offsets'):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        m = self.scores.shape[0]
        for name in ('boxes', 'anchors', 'offsets'):
            arr = getattr(self, name)
            if arr.shape != (m, 4):
                raise ValueError(f"{name} 形状应为 ({m}, 4)，实际 {arr.shape}")

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def num_object_classes(self) -> int:
        return self.scores.shape[1] - 1

    @property
    def detections(self) -> Tuple[DetectionRecord, ...]:
        return tuple(
            DetectionRecord(
                scores=self.scores[j],
                box=BoxCWH.from_array(self.boxes[j]),
                anchor=BoxCWH.from_array(self.anchors[j]),
                pred_offsets=tuple(float(v) for v in self.offsets[j]),
            )
            for j in range(len(self))
        )


@dataclass(frozen=True)
class ScoredDetection:
    """NMS 之后的最终检测，用于 mAP 评估"""

    box: BoxCWH
    label: int
    score: float


@dataclass(frozen=True)
class LossWeights:
    """三项攻击损失的开关、权重与目标类别"""

    use_tpc: bool = True
    use_tps: bool = True
    use_fpc: bool = True
    target_class: Optional[int] = None
    tpc_weight: float = 1.0
    tps_weight: float = 1.0
    fpc_weight: float = 1.0

    def __post_init__(self):
        if not (self.use_tpc or self.use_tps or self.use_fpc):
            raise ValueError("至少需要启用一项损失 (TPC / TPS / FPC)")

    @property
    def uses_true_positives(self) -> bool:
        return self.use_tpc or self.use_tps

    @property
    def combo_name(self) -> str:
        names = [n for n, on in (('tpc', self.use_tpc), ('tps', self.use_tps), ('fpc', self.use_fpc)) if on]
        return '+'.join(names)

    def without_fpc(self) -> "LossWeights":
        return LossWeights(
            use_tpc=self.use_tpc,
            use_tps=self.use_tps,
            use_fpc=False,
            target_class=self.target_class,
            tpc_weight=self.tpc_weight,
            tps_weight=self.tps_weight,
            fpc_weight=self.fpc_weight,
        )

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(
            use_tpc=self.use_tpc,
            use_tps=self.use_tps,
            use_fpc=self.use_fpc,
            target_class=self.target_class,
            tpc_weight=self.tpc_weight * factor,
            tps_weight=self.tps_weight * factor,
            fpc_weight=self.fpc_weight * factor,
        )

    @classmethod
    def from_combo(cls, combo: str, target_class: Optional[int] = None) -> "LossWeights":
        """
        由组合名构造，例如 "tpc+tps+fpc"

        Args:
            combo: 'tpc' / 'tps' / 'tpc+tps' / 'fpc' / 'tpc+tps+fpc'（大小写不敏感）
            target_class: 定向误检的类别
        """
        parts = {p.strip().lower() for p in combo.split('+') if p.strip()}
        unknown = parts - {'tpc', 'tps', 'fpc'}
        if unknown or not parts:
            raise ValueError(f"无法识别的损失组合: {combo}")
        return cls(
            use_tpc='tpc' in parts,
            use_tps='tps' in parts,
            use_fpc='fpc' in parts,
            target_class=target_class,
        )


def detections_to_arrays(dets: List[ScoredDetection]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ScoredDetection 列表 -> (boxes N×4, labels N, scores N)"""
    if not dets:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0)
    boxes = np.stack([d.box.as_array() for d in dets])
    labels = np.array([d.label for d in dets], dtype=np.int64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return boxes, labels, scores
