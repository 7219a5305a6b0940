"""
核心类型模块 - 框、图像、补丁与几何运算
"""
from .types import BoxCWH, ImageBuffer, GroundTruth, Patch, PatchSet, PixelMask
from .geometry import (
    iou,
    iou_matrix,
    rasterize,
    masked_update,
    box_min_distance,
    boxes_overlap,
    inside_image,
)

__all__ = [
    'BoxCWH',
    'ImageBuffer',
    'GroundTruth',
    'Patch',
    'PatchSet',
    'PixelMask',
    'iou',
    'iou_matrix',
    'rasterize',
    'masked_update',
    'box_min_distance',
    'boxes_overlap',
    'inside_image',
]
