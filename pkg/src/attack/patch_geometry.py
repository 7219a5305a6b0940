"""
补丁几何 - 目标聚类、滑窗初始化背景补丁、按梯度强度逐步扩展
"""
from dataclasses import dataclass
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from src.core.geometry import (
    boxes_overlap,
    box_min_distance,
    inside_image,
    min_distance_matrix,
    pixel_bounds,
)
from src.core.types import BoxCWH, GroundTruth, Patch, PatchSet

logger = logging.getLogger(__name__)

DIRECTIONS = ('left', 'right', 'top', 'down')
# 无目标时使用的整图分组编号
IMAGE_GROUP_ID = -1


@dataclass(frozen=True)
class GeometryConfig:
    """补丁几何参数（尺寸相关的量均为比例因子）"""

    n_b: int = 3
    init_scale: float = 0.2
    aspect_ratios: Tuple[float, ...] = (1.0, 0.67, 0.75, 1.5, 1.33)
    min_dist_factor: float = 0.2
    expand_stride_factor: float = 0.02
    cluster_threshold_factor: float = 0.2
    # 距离消融：补丁与物体的间距固定为 fixed_distance × 物体最长边
    fixed_distance: Optional[float] = None

    def __post_init__(self):
        if self.n_b < 1:
            raise ValueError(f"n_b 必须 >= 1: {self.n_b}")
        factors = {
            'init_scale': self.init_scale,
            'min_dist_factor': self.min_dist_factor,
            'expand_stride_factor': self.expand_stride_factor,
            'cluster_threshold_factor': self.cluster_threshold_factor,
        }
        for name, value in factors.items():
            if not value > 0:
                raise ValueError(f"{name} 必须为正: {value}")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError(f"aspect_ratios 必须为正: {self.aspect_ratios}")
        if self.fixed_distance is not None and not 0.0 <= self.fixed_distance <= 1.0:
            raise ValueError(f"fixed_distance 必须在 [0, 1] 内: {self.fixed_distance}")


@dataclass(frozen=True)
class ObjectGroup:
    """空间上相近的一组目标"""

    group_id: int
    member_indices: Tuple[int, ...]
    bounding_region: BoxCWH


@dataclass(frozen=True)
class ExpansionDecision:
    patch_index: int
    direction: Optional[str]
    gain: float


def expand_stride(image_dims: Tuple[int, int], cfg: GeometryConfig) -> float:
    """扩展步长 = expand_stride_factor × 图像短边"""
    return cfg.expand_stride_factor * min(image_dims)


def candidate_shapes(obj: BoxCWH, cfg: GeometryConfig) -> List[Tuple[float, float]]:
    """
    某个目标对应的候选补丁尺寸

    面积 = init_scale² × 目标面积，各宽高比下保持面积不变。
    """
    area = (cfg.init_scale ** 2) * obj.area
    return [(math.sqrt(area * r), math.sqrt(area / r)) for r in cfg.aspect_ratios]


def cluster_objects(
    gt: GroundTruth,
    image_dims: Tuple[int, int],
    cfg: GeometryConfig,
) -> List[ObjectGroup]:
    """
    按框间最小距离做单链接聚类

    阈值为 cluster_threshold_factor × 图像短边；分组按最小成员下标排序。
    """
    n = len(gt)
    if n == 0:
        logger.warning("⚠️  没有目标可聚类，仅能使用 FPC 放置补丁")
        return []

    if n == 1:
        labels = np.array([1])
    else:
        dist = min_distance_matrix(gt.boxes, gt.boxes)
        np.fill_diagonal(dist, 0.0)
        dist = (dist + dist.T) / 2
        tree = linkage(squareform(dist, checks=False), method='single')
        threshold = cfg.cluster_threshold_factor * min(image_dims)
        labels = fcluster(tree, t=threshold, criterion='distance')

    members: Dict[int, List[int]] = {}
    for idx, label in enumerate(labels):
        members.setdefault(int(label), []).append(idx)

    ordered = sorted(members.values(), key=lambda m: min(m))
    groups = []
    for group_id, idxs in enumerate(ordered):
        boxes = [gt.boxes[i] for i in idxs]
        region = BoxCWH.from_xyxy(
            min(b.x1 for b in boxes),
            min(b.y1 for b in boxes),
            max(b.x2 for b in boxes),
            max(b.y2 for b in boxes),
        )
        groups.append(ObjectGroup(group_id=group_id, member_indices=tuple(idxs), bounding_region=region))
    return groups


def gradient_intensity(grad: np.ndarray) -> np.ndarray:
    """逐像素梯度强度：通道上的 L1 范数"""
    grad = np.asarray(grad, dtype=np.float64)
    return np.abs(grad).sum(axis=-1) if grad.ndim == 3 else np.abs(grad)


class IntensityTable:
    """梯度强度的积分图，O(1) 计算任意像素矩形的强度和"""

    def __init__(self, intensity: np.ndarray):
        self.height, self.width = intensity.shape
        table = np.zeros((self.height + 1, self.width + 1), dtype=np.float64)
        table[1:, 1:] = intensity.cumsum(axis=0).cumsum(axis=1)
        self.table = table

    def rect_sum(self, r0: int, r1: int, c0: int, c1: int) -> float:
        r0, r1 = max(r0, 0), min(r1, self.height)
        c0, c1 = max(c0, 0), min(c1, self.width)
        if r1 <= r0 or c1 <= c0:
            return 0.0
        t = self.table
        return float(t[r1, c1] - t[r0, c1] - t[r1, c0] + t[r0, c0])

    def box_sum(self, box: BoxCWH) -> float:
        return self.rect_sum(*pixel_bounds(box))


def _group_threshold(gt: GroundTruth, members: Sequence[int], cfg: GeometryConfig) -> float:
    return cfg.min_dist_factor * max(gt.boxes[i].longest_side for i in members)


def _distance_ok(
    box: BoxCWH,
    gt: GroundTruth,
    members: Sequence[int],
    cfg: GeometryConfig,
    stride: float,
    anchor_member: Optional[int] = None,
) -> bool:
    """补丁与分组内目标的距离约束"""
    if cfg.fixed_distance is None:
        threshold = _group_threshold(gt, members, cfg)
        return all(box_min_distance(box, gt.boxes[i]) >= threshold - 1e-9 for i in members)

    # 距离消融：与各目标至少相距 d×最长边，且与所属目标的间距落在宽度为一个步长的环内
    for i in members:
        ring = cfg.fixed_distance * gt.boxes[i].longest_side
        dist = box_min_distance(box, gt.boxes[i])
        if dist < ring - 1e-9:
            return False
        if anchor_member == i and dist >= ring + stride:
            return False
    return True


def _feasible(
    box: BoxCWH,
    gt: GroundTruth,
    chosen: Sequence[BoxCWH],
    image_dims: Tuple[int, int],
) -> bool:
    if not inside_image(box, image_dims):
        return False
    if any(boxes_overlap(box, g) for g in gt.boxes):
        return False
    return not any(boxes_overlap(box, c) for c in chosen)


def _sliding_candidates(
    shape: Tuple[float, float],
    image_dims: Tuple[int, int],
    stride: float,
) -> List[BoxCWH]:
    """按行优先顺序生成滑窗位置"""
    w, h = shape
    height, width = image_dims
    if w > width or h > height:
        return []
    xs = np.arange(0.0, width - w + 1e-9, stride)
    ys = np.arange(0.0, height - h + 1e-9, stride)
    return [BoxCWH(x + w / 2, y + h / 2, w, h) for y in ys for x in xs]


def _pick_patches(
    scored: List[Tuple[float, float, float, int, BoxCWH]],
    n_b: int,
    gt: GroundTruth,
    chosen: List[BoxCWH],
    image_dims: Tuple[int, int],
) -> List[BoxCWH]:
    """按 (强度降序, 行, 列, 生成顺序) 贪心选择互不重叠的补丁"""
    scored.sort(key=lambda item: (-item[0], item[1], item[2], item[3]))
    picked: List[BoxCWH] = []
    for _, _, _, _, box in scored:
        if len(picked) >= n_b:
            break
        if _feasible(box, gt, chosen + picked, image_dims):
            picked.append(box)
    return picked


def init_patches(
    groups: Sequence[ObjectGroup],
    gt: GroundTruth,
    grad: np.ndarray,
    image_dims: Tuple[int, int],
    cfg: GeometryConfig,
) -> PatchSet:
    """
    为每个分组选择 n_b 个初始背景补丁

    约束：与组内目标的距离不小于 min_dist_factor × 组内最大边长；
    与所有真值框零重叠；补丁之间不重叠；完全位于图像内。
    可行位置不足时返回已选补丁并记录缺口，不中断攻击。
    """
    table = IntensityTable(gradient_intensity(grad))
    stride = expand_stride(image_dims, cfg)
    chosen: List[BoxCWH] = []
    patches: List[Patch] = []

    for group in groups:
        scored = []
        order = 0
        for member in group.member_indices:
            for shape in candidate_shapes(gt.boxes[member], cfg):
                for box in _sliding_candidates(shape, image_dims, stride):
                    order += 1
                    if not _distance_ok(box, gt, group.member_indices, cfg, stride, anchor_member=member):
                        continue
                    scored.append((table.box_sum(box), box.y1, box.x1, order, box))

        picked = _pick_patches(scored, cfg.n_b, gt, chosen, image_dims)
        if len(picked) < cfg.n_b:
            logger.warning(
                f"⚠️  分组 {group.group_id} 只找到 {len(picked)}/{cfg.n_b} 个可行补丁位置"
            )
        chosen.extend(picked)
        patches.extend(Patch(box=b, group_id=group.group_id) for b in picked)

    return PatchSet(patches=tuple(patches))


def init_background_patches(
    gt: GroundTruth,
    grad: np.ndarray,
    image_dims: Tuple[int, int],
    cfg: GeometryConfig,
) -> PatchSet:
    """
    无目标分组时（仅 FPC）的补丁初始化：整图作为一个分组，
    候选尺寸为 init_scale × 图像短边，与所有真值框零重叠
    """
    table = IntensityTable(gradient_intensity(grad))
    stride = expand_stride(image_dims, cfg)
    side = cfg.init_scale * min(image_dims)
    reference = BoxCWH(side / 2, side / 2, side, side)

    scored = []
    order = 0
    for shape in candidate_shapes(reference, GeometryConfig(
        n_b=cfg.n_b, init_scale=1.0, aspect_ratios=cfg.aspect_ratios,
    )):
        for box in _sliding_candidates(shape, image_dims, stride):
            order += 1
            scored.append((table.box_sum(box), box.y1, box.x1, order, box))

    picked = _pick_patches(scored, cfg.n_b, gt, [], image_dims)
    if len(picked) < cfg.n_b:
        logger.warning(f"⚠️  整图只找到 {len(picked)}/{cfg.n_b} 个可行补丁位置")
    return PatchSet(patches=tuple(Patch(box=b, group_id=IMAGE_GROUP_ID) for b in picked))


def _strip_sum(table: IntensityTable, current: BoxCWH, grown: BoxCWH, direction: str) -> float:
    """扩展新增条带（像素坐标）内的梯度强度和"""
    r0, r1, c0, c1 = pixel_bounds(current)
    g0, g1, h0, h1 = pixel_bounds(grown)
    if direction == 'left':
        return table.rect_sum(r0, r1, h0, c0)
    if direction == 'right':
        return table.rect_sum(r0, r1, c1, h1)
    if direction == 'top':
        return table.rect_sum(g0, r0, c0, c1)
    return table.rect_sum(r1, g1, c0, c1)


def _grow(box: BoxCWH, direction: str, stride: float) -> BoxCWH:
    x1, y1, x2, y2 = box.to_xyxy()
    if direction == 'left':
        x1 -= stride
    elif direction == 'right':
        x2 += stride
    elif direction == 'top':
        y1 -= stride
    else:
        y2 += stride
    return BoxCWH.from_xyxy(x1, y1, x2, y2)


def expand_patches(
    patches: PatchSet,
    grad: np.ndarray,
    gt: GroundTruth,
    image_dims: Tuple[int, int],
    cfg: GeometryConfig,
    groups: Optional[Sequence[ObjectGroup]] = None,
) -> Tuple[PatchSet, List[ExpansionDecision]]:
    """
    每个补丁向梯度强度增加最多的方向扩展一个步长

    会导致与真值重叠、与其他补丁重叠、违反距离约束或越出图像的方向被屏蔽；
    四个方向都被屏蔽时补丁保持不变。并列时按 left < right < top < down。

    Args:
        groups: 目标分组；缺省时重新聚类

    Returns:
        (扩展后的补丁集合, 每个补丁的扩展决策)
    """
    if groups is None:
        groups = cluster_objects(gt, image_dims, cfg)
    members_of = {g.group_id: g.member_indices for g in groups}

    table = IntensityTable(gradient_intensity(grad))
    stride = expand_stride(image_dims, cfg)
    boxes = [p.box for p in patches]
    decisions: List[ExpansionDecision] = []

    for idx, patch in enumerate(patches):
        current = boxes[idx]
        others = boxes[:idx] + boxes[idx + 1:]
        members = members_of.get(patch.group_id, ())

        best_dir, best_gain = None, -math.inf
        for direction in DIRECTIONS:
            grown = _grow(current, direction, stride)
            if not _feasible(grown, gt, others, image_dims):
                continue
            if members and not _distance_ok(grown, gt, members, cfg, stride):
                continue
            gain = _strip_sum(table, current, grown, direction)
            if gain > best_gain:
                best_dir, best_gain = direction, gain

        if best_dir is not None:
            boxes[idx] = _grow(current, best_dir, stride)
        decisions.append(ExpansionDecision(
            patch_index=idx,
            direction=best_dir,
            gain=float(best_gain) if best_dir is not None else 0.0,
        ))

    expanded = PatchSet(patches=tuple(
        Patch(box=b, group_id=p.group_id) for b, p in zip(boxes, patches)
    ))
    return expanded, decisions
