"""
检测器模块 - SSM 适配契约、锚框偏移编码与内置玩具检测器
"""
from .outputs import (
    DetectorMetadata,
    DetectionRecord,
    SsmOutputs,
    ScoredDetection,
    LossWeights,
    NoActiveLossError,
    LOSS_COMBOS,
)
from .offsets import encode_offsets, decode_offsets
from .interface import SingleShotDetector, ObjectiveResult

__all__ = [
    'DetectorMetadata',
    'DetectionRecord',
    'SsmOutputs',
    'ScoredDetection',
    'LossWeights',
    'NoActiveLossError',
    'LOSS_COMBOS',
    'encode_offsets',
    'decode_offsets',
    'SingleShotDetector',
    'ObjectiveResult',
]
