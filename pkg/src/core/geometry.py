"""
几何运算 - IoU、补丁栅格化、掩码更新与框间最小距离
"""
import math
from typing import Sequence, Tuple

import numpy as np
import torch
from torchvision.ops import box_convert, box_iou

from src.core.types import BoxCWH, ImageBuffer, PatchSet, PixelMask, PIXEL_MIN, PIXEL_MAX

# 浮点误差容限：IoU 小于该值视为零重叠
ZERO_IOU_EPS = 1e-9


def iou(a: BoxCWH, b: BoxCWH) -> float:
    """两个框的交并比，对称且取值 [0, 1]"""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """
    批量 IoU

    Args:
        boxes_a: K×4 (cx, cy, w, h)
        boxes_b: L×4 (cx, cy, w, h)

    Returns:
        K×L IoU 矩阵
    """
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    xyxy_a = box_convert(torch.from_numpy(boxes_a), in_fmt='cxcywh', out_fmt='xyxy')
    xyxy_b = box_convert(torch.from_numpy(boxes_b), in_fmt='cxcywh', out_fmt='xyxy')
    return box_iou(xyxy_a, xyxy_b).numpy()


def boxes_overlap(a: BoxCWH, b: BoxCWH) -> bool:
    """两个框是否有正面积的交集（仅边界接触不算重叠）"""
    return iou(a, b) > ZERO_IOU_EPS


def inside_image(box: BoxCWH, image_dims: Tuple[int, int], tol: float = 1e-9) -> bool:
    height, width = image_dims
    return (
        box.x1 >= -tol and box.y1 >= -tol
        and box.x2 <= width + tol and box.y2 <= height + tol
    )


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def pixel_bounds(box: BoxCWH) -> Tuple[int, int, int, int]:
    """
    将实数框对齐到像素网格（四舍五入，0.5 进位）

    Returns:
        (row0, row1, col0, col1)，半开区间
    """
    return (
        _round_half_up(box.y1),
        _round_half_up(box.y2),
        _round_half_up(box.x1),
        _round_half_up(box.x2),
    )


def rasterize(patches: PatchSet, image_dims: Tuple[int, int]) -> PixelMask:
    """
    补丁集合 -> 像素掩码

    像素中心落在（对齐后的）矩形内即计入掩码。

    Args:
        patches: 背景补丁集合
        image_dims: (height, width)

    Returns:
        H×W 的 bool 掩码
    """
    height, width = image_dims
    mask = np.zeros((height, width), dtype=bool)
    for idx, patch in enumerate(patches):
        if not inside_image(patch.box, image_dims):
            raise ValueError(f"补丁 {idx} 超出图像范围: {patch.box}")
        r0, r1, c0, c1 = pixel_bounds(patch.box)
        mask[max(r0, 0):min(r1, height), max(c0, 0):min(c1, width)] = True
    return mask


def masked_update(img: ImageBuffer, delta: np.ndarray, mask: PixelMask) -> ImageBuffer:
    """
    掩码内像素执行 clip(old - delta, 0, 255)，掩码外像素保持不变
    """
    delta = np.asarray(delta, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if delta.shape != img.pixels.shape:
        raise ValueError(f"delta 形状 {delta.shape} 与图像 {img.pixels.shape} 不一致")
    if mask.shape != img.dims:
        raise ValueError(f"掩码形状 {mask.shape} 与图像 {img.dims} 不一致")

    updated = img.copy_pixels()
    stepped = np.clip(updated - delta, PIXEL_MIN, PIXEL_MAX)
    updated[mask] = stepped[mask]
    return ImageBuffer(updated)


def box_min_distance(a: BoxCWH, b: BoxCWH) -> float:
    """两个矩形点集之间的最小欧氏距离，接触或重叠时为 0"""
    dx = max(0.0, max(a.x1, b.x1) - min(a.x2, b.x2))
    dy = max(0.0, max(a.y1, b.y1) - min(a.y2, b.y2))
    return float(math.hypot(dx, dy))


def min_distance_matrix(boxes_a: Sequence[BoxCWH], boxes_b: Sequence[BoxCWH]) -> np.ndarray:
    """box_min_distance 的批量版本"""
    a = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes_a], dtype=np.float64).reshape(-1, 4)
    b = np.array([[x.x1, x.y1, x.x2, x.y2] for x in boxes_b], dtype=np.float64).reshape(-1, 4)
    dx = np.maximum(0.0, np.maximum(a[:, None, 0], b[None, :, 0]) - np.minimum(a[:, None, 2], b[None, :, 2]))
    dy = np.maximum(0.0, np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 3], b[None, :, 3]))
    return np.hypot(dx, dy)
