"""
核心数据类型 - 中心点形式的框、图像缓冲区、真值标注与背景补丁
"""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

# 二值掩码 (H×W, bool)，等于补丁矩形栅格化后的并集
PixelMask = np.ndarray

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


@dataclass(frozen=True)
class BoxCWH:
    """中心点/尺寸形式的矩形框 (cx, cy, w, h)，单位为像素"""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"框的宽高必须为正: w={self.w}, h={self.h}")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def longest_side(self) -> float:
        return max(self.w, self.h)

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BoxCWH":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_top_left(cls, x: float, y: float, w: float, h: float) -> "BoxCWH":
        """COCO 标注的左上角形式 (x, y, w, h) 转中心点形式"""
        return cls(x + w / 2, y + h / 2, w, h)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "BoxCWH":
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx, cy, w, h)


@dataclass(frozen=True)
class ImageBuffer:
    """
    H×W×3 实数像素数组，取值范围 [0, 255]

    攻击过程中的每一步都生成新的 ImageBuffer，内部数组只读。
    """

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"图像必须是 H×W×3 数组，实际形状: {arr.shape}")
        if arr.size and (arr.min() < PIXEL_MIN or arr.max() > PIXEL_MAX):
            raise ValueError(
                f"像素值超出 [0, 255]: min={arr.min():.4f}, max={arr.max():.4f}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, 'pixels', arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def dims(self) -> Tuple[int, int]:
        """(height, width)"""
        return (self.height, self.width)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.floor(self.pixels + 0.5), 0, 255).astype(np.uint8)

    def copy_pixels(self) -> np.ndarray:
        """返回可写副本"""
        return np.array(self.pixels, copy=True)


@dataclass(frozen=True)
class GroundTruth:
    """N 个真值框及其类别（类别从 1 开始，0 为背景）"""

    boxes: Tuple[BoxCWH, ...] = ()
    labels: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'boxes', tuple(self.boxes))
        object.__setattr__(self, 'labels', tuple(int(v) for v in self.labels))
        if len(self.boxes) != len(self.labels):
            raise ValueError(
                f"boxes 与 labels 数量不一致: {len(self.boxes)} vs {len(self.labels)}"
            )
        for label in self.labels:
            if label < 1:
                raise ValueError(f"真值类别不能是背景类或负数: {label}")

    def __len__(self) -> int:
        return len(self.boxes)

    def boxes_array(self) -> np.ndarray:
        """N×4 的 (cx, cy, w, h) 数组"""
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.float64)
        return np.stack([b.as_array() for b in self.boxes])

    def labels_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "GroundTruth":
        return GroundTruth(
            boxes=tuple(self.boxes[i] for i in indices),
            labels=tuple(self.labels[i] for i in indices),
        )

    def with_labels(self, label: int) -> "GroundTruth":
        """所有框统一为同一类别（两阶段 RPN 只区分 object / background）"""
        return GroundTruth(boxes=self.boxes, labels=tuple(label for _ in self.boxes))


@dataclass(frozen=True)
class Patch:
    """一个背景补丁矩形及其所属的目标分组"""

    box: BoxCWH
    group_id: int

    def to_dict(self) -> Dict:
        return {
            'group_id': self.group_id,
            'cx': self.box.cx,
            'cy': self.box.cy,
            'w': self.box.w,
            'h': self.box.h,
        }

    @classmethod
    def from_dict(cls, item: Dict) -> "Patch":
        return cls(
            box=BoxCWH(float(item['cx']), float(item['cy']), float(item['w']), float(item['h'])),
            group_id=int(item['group_id']),
        )


def _positive_overlap(a: BoxCWH, b: BoxCWH) -> bool:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    return ix > 1e-9 and iy > 1e-9


@dataclass(frozen=True)
class PatchSet:
    """K 个两两不重叠的背景补丁"""

    patches: Tuple[Patch, ...] = field(default_factory=tuple)

    def __post_init__(self):
        patches = tuple(self.patches)
        object.__setattr__(self, 'patches', patches)
        for i in range(len(patches)):
            for j in range(i + 1, len(patches)):
                if _positive_overlap(patches[i].box, patches[j].box):
                    raise ValueError(f"补丁 {i} 与补丁 {j} 重叠")

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self) -> Iterator[Patch]:
        return iter(self.patches)

    def __getitem__(self, idx: int) -> Patch:
        return self.patches[idx]

    @property
    def boxes(self) -> List[BoxCWH]:
        return [p.box for p in self.patches]

    def areas(self) -> List[float]:
        return [p.box.area for p in self.patches]

    def total_area(self) -> float:
        return float(sum(self.areas()))

    def boxes_array(self) -> np.ndarray:
        if not self.patches:
            return np.zeros((0, 4), dtype=np.float64)
        return np.stack([p.box.as_array() for p in self.patches])

    def group_ids(self) -> List[int]:
        return [p.group_id for p in self.patches]

    def to_json_list(self) -> List[Dict]:
        return [p.to_dict() for p in self.patches]

    @classmethod
    def from_json_list(cls, items: Sequence[Dict]) -> "PatchSet":
        return cls(patches=tuple(Patch.from_dict(item) for item in items))
