"""
玩具单阶段检测器 - 全卷积 SSD 风格网络，用于桌面规模的攻击与评估
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from src.detector.interface import SingleShotDetector
from src.detector.outputs import DetectorMetadata, StageKind

logger = logging.getLogger(__name__)

WEIGHT_FORMAT = 'bgpatch-toy-ssm'
WEIGHT_VERSION = 2

DEFAULT_INPUT_DIMS = (96, 96)
DEFAULT_STRIDE = 4
# 两个尺度各自以 IoU ≥ 0.5 覆盖约 [s/√2, s√2] 的边长，合起来覆盖 12~34 像素的合成物体
DEFAULT_ANCHOR_SIZES = (14.0, 26.0)
DEFAULT_ANCHOR_ASPECTS = (1.0, 1.5, 0.67)
TOY_NUM_OBJECT_CLASSES = 3


def build_anchors(
    input_dims: Tuple[int, int],
    stride: int,
    sizes: Sequence[float],
    aspects: Sequence[float],
) -> torch.Tensor:
    """
    生成锚框，顺序为 (行, 列, 尺寸, 宽高比)，与检测头输出展开顺序一致

    Returns:
        M×4 (cx, cy, w, h)，float64
    """
    height, width = input_dims
    rows, cols = height // stride, width // stride
    anchors = []
    for r in range(rows):
        for c in range(cols):
            cy = (r + 0.5) * stride
            cx = (c + 0.5) * stride
            for size in sizes:
                for aspect in aspects:
                    w = size * aspect ** 0.5
                    h = size / aspect ** 0.5
                    anchors.append((cx, cy, w, h))
    return torch.tensor(anchors, dtype=torch.float64)


def _conv_block(in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.SiLU(),
    )


class ToySSMNet(nn.Module):
    """
    小型全卷积单阶段检测网络

    两个步长为 2 的卷积下采样到 1/4（与 DEFAULT_STRIDE 一致），再接三层空洞卷积
    (dilation 2 / 4 / 8) 把感受野扩大到整幅 96×96 图像，使背景像素能够影响物体处的
    检测输出。激活函数使用 SiLU（处处可导），BatchNorm 在攻击时处于 eval 模式，
    对输入是固定的仿射变换。
    """

    def __init__(self, num_scores: int, num_anchors: int, width: int = 64):
        super().__init__()
        self.num_scores = num_scores
        self.num_anchors = num_anchors
        self.backbone = nn.Sequential(
            _conv_block(3, 16, stride=2),
            _conv_block(16, 32, stride=2),
            _conv_block(32, width),
            _conv_block(width, width, dilation=2),
            _conv_block(width, width, dilation=4),
            _conv_block(width, width, dilation=8),
        )
        self.cls_head = nn.Conv2d(width, num_anchors * num_scores, 3, padding=1)
        self.reg_head = nn.Conv2d(width, num_anchors * 4, 3, padding=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        feat = self.backbone(x)
        n = x.shape[0]
        logits = self.cls_head(feat).permute(0, 2, 3, 1).reshape(n, -1, self.num_scores)
        offsets = self.reg_head(feat).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, offsets


def normalize_pixels(x: torch.Tensor) -> torch.Tensor:
    """像素 [0, 255] -> 网络输入（近似零均值）"""
    return (x / 255.0 - 0.5) / 0.25


class ToySSM(SingleShotDetector):
    """玩具检测器：ToySSMNet + 固定锚框"""

    def __init__(
        self,
        net: ToySSMNet,
        metadata: DetectorMetadata,
        stride: int = DEFAULT_STRIDE,
        anchor_sizes: Sequence[float] = DEFAULT_ANCHOR_SIZES,
        anchor_aspects: Sequence[float] = DEFAULT_ANCHOR_ASPECTS,
        seed: int = 0,
        info: Optional[Dict] = None,
    ):
        self.net = net.double().eval()
        self.net.requires_grad_(False)
        self._metadata = metadata
        self.stride = stride
        self.anchor_sizes = tuple(float(s) for s in anchor_sizes)
        self.anchor_aspects = tuple(float(a) for a in anchor_aspects)
        self.seed = seed
        self.info = dict(info or {})
        self._anchors = build_anchors(metadata.input_dims, stride, self.anchor_sizes, self.anchor_aspects)
        expected = len(self._anchors)
        if expected != self.num_cells * net.num_anchors:
            raise ValueError("锚框数量与检测头输出不一致")
        logger.debug(f"ToySSM 初始化完成 (seed={seed}, M={expected}, stage={metadata.stage_kind})")

    @property
    def metadata(self) -> DetectorMetadata:
        return self._metadata

    @property
    def anchors(self) -> torch.Tensor:
        return self._anchors

    @property
    def num_cells(self) -> int:
        height, width = self._metadata.input_dims
        return (height // self.stride) * (width // self.stride)

    def predict(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        logits, offsets = self.net(normalize_pixels(x.to(torch.float64)))
        return logits[0], offsets[0]

    def save(self, path: str):
        """保存权重文件（带格式与版本头）"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            'format': WEIGHT_FORMAT,
            'version': WEIGHT_VERSION,
            'seed': self.seed,
            'num_object_classes': self._metadata.num_object_classes,
            'stage_kind': self._metadata.stage_kind,
            'input_dims': list(self._metadata.input_dims),
            'stride': self.stride,
            'anchor_sizes': list(self.anchor_sizes),
            'anchor_aspects': list(self.anchor_aspects),
            'width': self.net.reg_head.in_channels,
            'info': self.info,
            'state_dict': self.net.state_dict(),
        }
        torch.save(payload, path)
        logger.info(f"✅ 玩具检测器已保存: {path}")

    @classmethod
    def load(cls, path: str) -> "ToySSM":
        payload = torch.load(path, map_location='cpu')
        if payload.get('format') != WEIGHT_FORMAT:
            raise ValueError(f"不是玩具检测器权重文件: {path}")
        if payload.get('version') != WEIGHT_VERSION:
            raise ValueError(
                f"权重文件版本 {payload.get('version')} 不受支持（当前 {WEIGHT_VERSION}）"
            )
        metadata = DetectorMetadata(
            num_object_classes=payload['num_object_classes'],
            stage_kind=payload['stage_kind'],
            input_dims=tuple(payload['input_dims']),
        )
        num_anchors = len(payload['anchor_sizes']) * len(payload['anchor_aspects'])
        net = ToySSMNet(metadata.num_scores, num_anchors, width=payload['width'])
        net.load_state_dict(payload['state_dict'])
        detector = cls(
            net,
            metadata,
            stride=payload['stride'],
            anchor_sizes=payload['anchor_sizes'],
            anchor_aspects=payload['anchor_aspects'],
            seed=payload['seed'],
            info=payload.get('info'),
        )
        logger.info(f"✅ 玩具检测器已加载: {path} (seed={detector.seed})")
        return detector


def build_untrained(
    seed: int,
    stage_kind: StageKind = 'single-stage',
    input_dims: Tuple[int, int] = DEFAULT_INPUT_DIMS,
    num_object_classes: int = TOY_NUM_OBJECT_CLASSES,
) -> ToySSM:
    """按种子初始化一个未训练的玩具检测器"""
    if stage_kind == 'two-stage-rpn':
        num_object_classes = 1
    metadata = DetectorMetadata(
        num_object_classes=num_object_classes,
        stage_kind=stage_kind,
        input_dims=tuple(input_dims),
    )
    torch.manual_seed(seed)
    num_anchors = len(DEFAULT_ANCHOR_SIZES) * len(DEFAULT_ANCHOR_ASPECTS)
    net = ToySSMNet(metadata.num_scores, num_anchors)
    return ToySSM(net, metadata, seed=seed)
