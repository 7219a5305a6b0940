"""
标注读取 - COCO 风格 JSON -> (图像引用, GroundTruth)
"""
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from src.core.types import BoxCWH, GroundTruth, ImageBuffer

logger = logging.getLogger(__name__)


@dataclass
class DatasetSample:
    """一张图像及其真值；图像可在内存中，也可按路径延迟读取"""

    image_id: str
    gt: GroundTruth
    width: int
    height: int
    path: Optional[str] = None
    image: Optional[ImageBuffer] = None

    def load_image(self) -> ImageBuffer:
        if self.image is None:
            if self.path is None:
                raise ValueError(f"样本 {self.image_id} 既没有像素也没有路径")
            self.image = load_image_file(self.path)
        return self.image


@dataclass
class IngestResult:
    """读取结果：样本列表 + 逐项错误列表 + 类别映射"""

    samples: List[DatasetSample]
    errors: List[str] = field(default_factory=list)
    category_map: Dict[int, int] = field(default_factory=dict)
    category_names: Dict[int, str] = field(default_factory=dict)


def load_image_file(path: str) -> ImageBuffer:
    """读取无损图像（.png）或精确浮点数组（.npy）"""
    path = Path(path)
    if path.suffix == '.npy':
        return ImageBuffer(np.load(path))
    with Image.open(path) as im:
        return ImageBuffer(np.asarray(im.convert('RGB'), dtype=np.float64))


def ingest_annotations(
    path: str,
    image_root: Optional[str] = None,
    subsample: Optional[int] = None,
    seed: int = 0,
) -> IngestResult:
    """
    读取 COCO 风格标注

    Args:
        path: 标注 JSON 路径（images / annotations / categories 数组，bbox 为左上角形式）
        image_root: 图像目录；缺省为标注文件所在目录
        subsample: 随机抽取的图像数量（可复现）
        seed: 抽样种子

    Returns:
        IngestResult；单条标注或单张图像出错时记录错误并继续
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"标注文件不是合法 JSON: {path} - {e}") from e

    if not isinstance(data, dict) or 'images' not in data:
        raise ValueError(f"标注文件缺少 images 数组: {path}")

    root = Path(image_root) if image_root else path.parent
    errors: List[str] = []

    category_ids = sorted({int(c['id']) for c in data.get('categories', [])})
    category_map = {cid: idx + 1 for idx, cid in enumerate(category_ids)}
    category_names = {
        category_map[int(c['id'])]: str(c.get('name', c['id']))
        for c in data.get('categories', [])
    }

    images: Dict[int, Dict] = {}
    for item in data['images']:
        try:
            images[int(item['id'])] = {
                'file_name': str(item['file_name']),
                'width': int(item['width']),
                'height': int(item['height']),
            }
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"图像条目不合法: {item} - {e}")

    boxes: Dict[int, List[BoxCWH]] = {img_id: [] for img_id in images}
    labels: Dict[int, List[int]] = {img_id: [] for img_id in images}
    for ann in data.get('annotations', []):
        try:
            if ann.get('iscrowd', 0):
                continue
            img_id = int(ann['image_id'])
            if img_id not in images:
                errors.append(f"标注 {ann.get('id')} 引用了不存在的图像 {img_id}")
                continue
            cat_id = int(ann['category_id'])
            if cat_id not in category_map:
                category_map[cat_id] = len(category_map) + 1
            x, y, w, h = (float(v) for v in ann['bbox'])
            boxes[img_id].append(BoxCWH.from_top_left(x, y, w, h))
            labels[img_id].append(category_map[cat_id])
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"标注条目不合法: {ann.get('id')} - {e}")

    samples: List[DatasetSample] = []
    for img_id in sorted(images):
        info = images[img_id]
        image_path = root / info['file_name']
        if not image_path.exists():
            errors.append(f"图像文件不存在: {image_path}")
            continue
        samples.append(DatasetSample(
            image_id=str(img_id),
            gt=GroundTruth(boxes=tuple(boxes[img_id]), labels=tuple(labels[img_id])),
            width=info['width'],
            height=info['height'],
            path=str(image_path),
        ))

    if subsample is not None and subsample < len(samples):
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(len(samples), size=subsample, replace=False))
        samples = [samples[i] for i in chosen]

    for err in errors:
        logger.error(f"❌ {err}")
    logger.info(f"✅ 标注读取完成: {len(samples)} 张图像, {len(errors)} 条错误")
    return IngestResult(
        samples=samples,
        errors=errors,
        category_map=category_map,
        category_names=category_names,
    )
