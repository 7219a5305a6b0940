"""
评估模块 - PSNR、mAP、背景误检与消融分组

实验编排见 src.evaluation.harness，消融实验见 src.evaluation.ablation
"""
from .metrics import (
    psnr,
    rms_for_psnr,
    average_precision,
    mean_average_precision,
    count_background_false_positives,
    MapResult,
)
from .grouping import scale_groups, distance_groups, ScaleGroups, DistanceGroups

__all__ = [
    'psnr',
    'rms_for_psnr',
    'average_precision',
    'mean_average_precision',
    'count_background_false_positives',
    'MapResult',
    'scale_groups',
    'distance_groups',
    'ScaleGroups',
    'DistanceGroups',
]
