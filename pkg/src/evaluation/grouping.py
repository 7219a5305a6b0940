"""
消融分组 - 按目标尺寸分 SG 组、按图像内目标间距分 DG 组
"""
from dataclasses import dataclass, field
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.geometry import min_distance_matrix
from src.core.types import GroundTruth

logger = logging.getLogger(__name__)


@dataclass
class ScaleGroups:
    """
    尺寸分组结果

    Attributes:
        assignments: 每张图像中每个目标所属的组号 (0 起)
        area_ranges: 每组的 (最小面积, 最大面积)，空组为 (nan, nan)
        sizes: 每组目标数
    """

    assignments: List[np.ndarray]
    area_ranges: List[Tuple[float, float]]
    sizes: List[int]

    @property
    def count(self) -> int:
        return len(self.sizes)

    def ignore_masks(self, group: int) -> List[np.ndarray]:
        """评估某一组时的真值忽略标记（不属于该组的目标被忽略）"""
        return [a != group for a in self.assignments]

    def label(self, group: int) -> str:
        return f"SG_{group + 1}"


@dataclass
class DistanceGroups:
    """
    间距分组结果

    Attributes:
        image_groups: 每张图像所属的组号 (0 起，DG_1 间距最大)
        distances: 每张图像归一化后的平均目标间距（单目标图像为 inf）
        mean_distance: 每组的平均间距（不含 inf）；组内全是单目标图像时为 None
        patches_per_object: 每组平均每个目标分到的补丁数；组内没有计数图像时为 None
    """

    image_groups: np.ndarray
    distances: np.ndarray
    mean_distance: List[Optional[float]]
    patches_per_object: List[Optional[float]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.mean_distance)

    def members(self, group: int) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.image_groups == group)]

    def label(self, group: int) -> str:
        return f"DG_{group + 1}"

    def to_rows(self) -> List[Dict]:
        rows = []
        for g in range(self.count):
            idx = self.members(g)
            rows.append({
                'group': self.label(g),
                'num_images': len(idx),
                'single_object_images': int(np.isinf(self.distances[idx]).sum()) if idx else 0,
                'mean_distance': self.mean_distance[g],
                'patches_per_object': self.patches_per_object[g] if self.patches_per_object else None,
            })
        return rows


def scale_groups(gts: Sequence[GroundTruth], count: int = 4) -> ScaleGroups:
    """
    所有目标按面积升序排列后等分为 count 组

    面积相同时按 (图像序号, 目标序号) 排序；目标少于组数时允许空组。
    """
    if count < 1:
        raise ValueError(f"count 必须 >= 1: {count}")

    keys = [(box.area, img_idx, obj_idx)
            for img_idx, gt in enumerate(gts)
            for obj_idx, box in enumerate(gt.boxes)]
    if len(keys) < count:
        logger.warning(f"⚠️  目标数 {len(keys)} 少于分组数 {count}，部分组为空")

    ordered = sorted(keys)
    assignments = [np.full(len(gt), -1, dtype=np.int64) for gt in gts]
    area_ranges: List[Tuple[float, float]] = []
    sizes: List[int] = []
    for group, chunk in enumerate(np.array_split(np.arange(len(ordered)), count)):
        members = [ordered[i] for i in chunk]
        for _, img_idx, obj_idx in members:
            assignments[img_idx][obj_idx] = group
        if members:
            area_ranges.append((members[0][0], members[-1][0]))
        else:
            area_ranges.append((math.nan, math.nan))
        sizes.append(len(members))

    return ScaleGroups(assignments=assignments, area_ranges=area_ranges, sizes=sizes)


def mean_object_distance(gt: GroundTruth, image_dims: Tuple[int, int]) -> float:
    """图像内目标两两最小距离的平均值 / 图像短边；少于两个目标时为 inf"""
    if len(gt) < 2:
        return math.inf
    dist = min_distance_matrix(gt.boxes, gt.boxes)
    upper = dist[np.triu_indices(len(gt), k=1)]
    return float(upper.mean() / min(image_dims))


def distance_groups(
    gts: Sequence[GroundTruth],
    image_dims: Sequence[Tuple[int, int]],
    count: int = 5,
    patch_counts: Optional[Sequence[Optional[int]]] = None,
) -> DistanceGroups:
    """
    图像按平均目标间距降序排列后等分为 count 组 (DG_1 间距最大)

    单目标图像间距视为无穷大，归入 DG_1；间距相同时按图像序号排序。

    Args:
        gts: 每张图像的真值
        image_dims: 每张图像的 (height, width)
        patch_counts: 每张图像攻击使用的补丁数，用于统计每目标补丁数；
            值为 None 的图像（攻击失败或没有放置补丁）不参与该统计
    """
    if count < 1:
        raise ValueError(f"count 必须 >= 1: {count}")
    if len(gts) != len(image_dims):
        raise ValueError("gts 与 image_dims 长度不一致")
    if patch_counts is not None and len(patch_counts) != len(gts):
        raise ValueError("patch_counts 与 gts 长度不一致")

    distances = np.array([mean_object_distance(gt, dims) for gt, dims in zip(gts, image_dims)], dtype=np.float64)
    order = sorted(range(len(gts)), key=lambda i: (-distances[i], i))
    image_groups = np.full(len(gts), -1, dtype=np.int64)
    for group, chunk in enumerate(np.array_split(np.asarray(order, dtype=np.int64), count)):
        image_groups[chunk] = group

    mean_distance: List[Optional[float]] = []
    per_object: List[Optional[float]] = []
    for group in range(count):
        idx = np.flatnonzero(image_groups == group)
        finite = distances[idx][np.isfinite(distances[idx])]
        mean_distance.append(float(finite.mean()) if finite.size else None)
        if patch_counts is not None:
            counted = [int(i) for i in idx if patch_counts[i] is not None]
            objects = sum(len(gts[i]) for i in counted)
            patches = sum(patch_counts[i] for i in counted)
            per_object.append(patches / objects if objects else None)

    return DistanceGroups(
        image_groups=image_groups,
        distances=distances,
        mean_distance=mean_distance,
        patches_per_object=per_object,
    )
