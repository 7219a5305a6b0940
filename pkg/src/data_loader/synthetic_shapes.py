"""
合成形状数据集 - 纹理背景上的彩色矩形 / 椭圆 / 空心框，用于训练与攻击玩具检测器
"""
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from src.core.types import BoxCWH, GroundTruth, ImageBuffer
from src.data_loader.annotations import DatasetSample

logger = logging.getLogger(__name__)

SHAPE_NAMES = {1: 'rectangle', 2: 'ellipse', 3: 'frame'}


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.normal(size=(size, size, 3))
    smooth = np.stack([gaussian_filter(noise[..., c], sigma=3.0) for c in range(3)], axis=-1)
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-8)
    base = rng.uniform(90, 160)
    return np.clip(base + 25.0 * smooth, 0, 255)


def _object_color(rng: np.random.Generator) -> Tuple[int, int, int]:
    channels = [rng.uniform(200, 255), rng.uniform(0, 60), rng.uniform(0, 255)]
    return tuple(int(v) for v in rng.permutation(channels))


def _place_boxes(
    rng: np.random.Generator,
    size: int,
    count: int,
    size_range: Tuple[int, int],
    min_gap: int,
    max_attempts: int = 60,
) -> List[Tuple[int, int, int, int]]:
    """随机放置两两间距不小于 min_gap 的左上角形式整数框 (x, y, w, h)"""
    placed: List[Tuple[int, int, int, int]] = []
    lo, hi = size_range
    for _ in range(count):
        for _ in range(max_attempts):
            w = int(rng.integers(lo, hi + 1))
            h = int(np.clip(w * rng.uniform(0.6, 1.6), lo, hi))
            x = int(rng.integers(1, size - w - 1))
            y = int(rng.integers(1, size - h - 1))
            clash = any(
                x < px + pw + min_gap and px < x + w + min_gap
                and y < py + ph + min_gap and py < y + h + min_gap
                for px, py, pw, ph in placed
            )
            if not clash:
                placed.append((x, y, w, h))
                break
    return placed


def _place_crowd(
    rng: np.random.Generator,
    size: int,
    size_range: Tuple[int, int],
    gap_range: Tuple[int, int],
) -> List[Tuple[int, int, int, int]]:
    """
    拥挤场景：四个物体排成 2×2，各自贴向中心十字缝

    横缝宽 gx、竖缝宽 gy，相邻物体间距恰为缝宽，对角物体间距为 hypot(gx, gy)。
    """
    lo, hi = size_range
    sizes = []
    for _ in range(4):
        w = int(rng.integers(lo, hi + 1))
        h = int(np.clip(w * rng.uniform(0.6, 1.6), lo, hi))
        sizes.append((w, h))
    gx = int(rng.integers(gap_range[0], gap_range[1] + 1))
    gy = int(rng.integers(gap_range[0], gap_range[1] + 1))

    left = max(sizes[0][0], sizes[2][0])
    right = max(sizes[1][0], sizes[3][0])
    top = max(sizes[0][1], sizes[1][1])
    bottom = max(sizes[2][1], sizes[3][1])
    cx = int(rng.integers(1 + left, size - 1 - right - gx + 1))
    cy = int(rng.integers(1 + top, size - 1 - bottom - gy + 1))

    (w0, h0), (w1, h1), (w2, h2), (w3, h3) = sizes
    return [
        (cx - w0, cy - h0, w0, h0),
        (cx + gx, cy - h1, w1, h1),
        (cx - w2, cy + gy, w2, h2),
        (cx + gx, cy + gy, w3, h3),
    ]


def render_sample(
    rng: np.random.Generator,
    image_id: str,
    image_size: int = 96,
    num_object_classes: int = 3,
    object_count: Tuple[int, int] = (1, 3),
    size_range: Tuple[int, int] = (12, 34),
    min_gap: int = 20,
    crowd_fraction: float = 0.4,
    crowd_size_range: Tuple[int, int] = (12, 24),
    crowd_gap_range: Tuple[int, int] = (2, 6),
) -> DatasetSample:
    """
    渲染一张合成图像及其真值

    以 crowd_fraction 的概率生成拥挤场景（四个物体紧挨着排成 2×2），
    否则生成稀疏场景（object_count 个物体，两两间距不小于 min_gap）。
    """
    background = _textured_background(rng, image_size)
    canvas = Image.fromarray(background.astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    if rng.uniform() < crowd_fraction:
        layout = _place_crowd(rng, image_size, crowd_size_range, crowd_gap_range)
    else:
        count = int(rng.integers(object_count[0], object_count[1] + 1))
        layout = _place_boxes(rng, image_size, count, size_range, min_gap)

    boxes, labels = [], []
    for x, y, w, h in layout:
        label = int(rng.integers(1, num_object_classes + 1))
        color = _object_color(rng)
        corners = (x, y, x + w - 1, y + h - 1)
        if label == 1:
            draw.rectangle(corners, fill=color)
        elif label == 2:
            draw.ellipse(corners, fill=color)
        else:
            draw.rectangle(corners, outline=color, width=3)
        boxes.append(BoxCWH.from_top_left(x, y, w, h))
        labels.append(label)

    image = ImageBuffer(np.asarray(canvas, dtype=np.float64))
    return DatasetSample(
        image_id=image_id,
        gt=GroundTruth(boxes=tuple(boxes), labels=tuple(labels)),
        width=image_size,
        height=image_size,
        image=image,
    )


def generate_shapes_dataset(
    num_images: int,
    seed: int,
    image_size: int = 96,
    num_object_classes: int = 3,
    object_count: Tuple[int, int] = (1, 3),
    size_range: Tuple[int, int] = (12, 34),
    crowd_fraction: float = 0.4,
    prefix: str = 'shapes',
) -> List[DatasetSample]:
    """
    生成合成形状数据集（给定种子完全可复现）

    Args:
        num_images: 图像数量
        seed: 随机种子
        image_size: 正方形图像边长
        num_object_classes: 类别数 (≤ 3)
        object_count: 稀疏场景的物体数量范围
        size_range: 稀疏场景的物体边长范围（像素）
        crowd_fraction: 拥挤场景（2×2 紧邻排列的四个物体）所占比例
    """
    if not 1 <= num_object_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_object_classes 必须在 [1, {len(SHAPE_NAMES)}] 内")
    if not 0.0 <= crowd_fraction <= 1.0:
        raise ValueError(f"crowd_fraction 必须在 [0, 1] 内: {crowd_fraction}")
    rng = np.random.default_rng(seed)
    samples = [
        render_sample(
            rng,
            image_id=f"{prefix}_{seed}_{i:05d}",
            image_size=image_size,
            num_object_classes=num_object_classes,
            object_count=object_count,
            size_range=size_range,
            crowd_fraction=crowd_fraction,
        )
        for i in range(num_images)
    ]
    logger.info(f"✅ 合成数据集生成完成: {len(samples)} 张 (seed={seed})")
    return samples


def write_coco_dataset(
    samples: List[DatasetSample],
    output_dir: str,
    annotation_name: str = 'annotations.json',
    num_object_classes: Optional[int] = None,
) -> str:
    """
    将样本写成 PNG 图像 + COCO 风格 JSON

    Returns:
        标注文件路径
    """
    out = Path(output_dir)
    (out / 'images').mkdir(parents=True, exist_ok=True)
    if num_object_classes is None:
        num_object_classes = max([max(s.gt.labels, default=1) for s in samples] or [1])

    images, annotations = [], []
    ann_id = 1
    for img_idx, sample in enumerate(samples, start=1):
        file_name = f"images/{sample.image_id}.png"
        Image.fromarray(sample.load_image().to_uint8()).save(out / file_name)
        images.append({
            'id': img_idx,
            'file_name': file_name,
            'width': sample.width,
            'height': sample.height,
        })
        for box, label in zip(sample.gt.boxes, sample.gt.labels):
            annotations.append({
                'id': ann_id,
                'image_id': img_idx,
                'category_id': label,
                'bbox': [box.x1, box.y1, box.w, box.h],
                'area': box.area,
                'iscrowd': 0,
            })
            ann_id += 1

    categories = [{'id': c, 'name': SHAPE_NAMES.get(c, str(c))} for c in range(1, num_object_classes + 1)]
    ann_path = out / annotation_name
    with open(ann_path, 'w', encoding='utf-8') as f:
        json.dump({'images': images, 'annotations': annotations, 'categories': categories}, f, indent=2)
    logger.info(f"✅ 数据集已写出: {ann_path} ({len(images)} 张, {len(annotations)} 个标注)")
    return str(ann_path)
