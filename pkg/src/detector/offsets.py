"""
锚框偏移编码 - 平移按锚框尺寸归一化，尺寸取对数比
"""
import math
from typing import Tuple

import torch

from src.core.types import BoxCWH

Offsets = Tuple[float, float, float, float]


def encode_offsets(anchor: BoxCWH, gt_box: BoxCWH) -> Offsets:
    """
    计算锚框到目标框的真实偏移

    Δx̄=(x̄−x_a)/w_a, Δȳ=(ȳ−y_a)/h_a, Δw̄=ln(w̄/w_a), Δh̄=ln(h̄/h_a)
    """
    return (
        (gt_box.cx - anchor.cx) / anchor.w,
        (gt_box.cy - anchor.cy) / anchor.h,
        math.log(gt_box.w / anchor.w),
        math.log(gt_box.h / anchor.h),
    )


def decode_offsets(anchor: BoxCWH, offsets: Offsets) -> BoxCWH:
    """encode_offsets 的逆变换"""
    dx, dy, dw, dh = offsets
    return BoxCWH(
        cx=anchor.cx + dx * anchor.w,
        cy=anchor.cy + dy * anchor.h,
        w=anchor.w * math.exp(dw),
        h=anchor.h * math.exp(dh),
    )


def encode_tensor(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """批量编码，anchors / boxes 均为 M×4 (cx, cy, w, h)"""
    if (anchors[:, 2:] <= 0).any() or (boxes[:, 2:] <= 0).any():
        raise ValueError("锚框和目标框的宽高必须为正")
    return torch.stack(
        [
            (boxes[:, 0] - anchors[:, 0]) / anchors[:, 2],
            (boxes[:, 1] - anchors[:, 1]) / anchors[:, 3],
            torch.log(boxes[:, 2] / anchors[:, 2]),
            torch.log(boxes[:, 3] / anchors[:, 3]),
        ],
        dim=1,
    )


def decode_tensor(anchors: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """批量解码，返回 M×4 (cx, cy, w, h)"""
    return torch.stack(
        [
            anchors[:, 0] + offsets[:, 0] * anchors[:, 2],
            anchors[:, 1] + offsets[:, 1] * anchors[:, 3],
            anchors[:, 2] * torch.exp(offsets[:, 2]),
            anchors[:, 3] * torch.exp(offsets[:, 3]),
        ],
        dim=1,
    )
