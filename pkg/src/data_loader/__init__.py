"""
数据加载模块 - COCO 风格标注读取与合成形状数据集
"""
from .annotations import DatasetSample, IngestResult, ingest_annotations, load_image_file
from .synthetic_shapes import generate_shapes_dataset, write_coco_dataset

__all__ = [
    'DatasetSample',
    'IngestResult',
    'ingest_annotations',
    'load_image_file',
    'generate_shapes_dataset',
    'write_coco_dataset',
]
