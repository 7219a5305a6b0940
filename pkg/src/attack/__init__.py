"""
攻击模块 - 背景补丁攻击的损失与补丁几何

攻击主循环、随机噪声基线与迁移回放分别位于
src.attack.optimizer / src.attack.baseline / src.attack.transfer
"""
from .losses import (
    LossBreakdown,
    Selections,
    TpSelection,
    FpSelection,
    select_true_positives,
    select_false_positives,
    tpc_loss,
    tps_loss,
    fpc_loss,
    total_loss,
)
from .patch_geometry import (
    GeometryConfig,
    ObjectGroup,
    ExpansionDecision,
    cluster_objects,
    init_patches,
    init_background_patches,
    expand_patches,
)

__all__ = [
    'LossBreakdown',
    'Selections',
    'TpSelection',
    'FpSelection',
    'select_true_positives',
    'select_false_positives',
    'tpc_loss',
    'tps_loss',
    'fpc_loss',
    'total_loss',
    'GeometryConfig',
    'ObjectGroup',
    'ExpansionDecision',
    'cluster_objects',
    'init_patches',
    'init_background_patches',
    'expand_patches',
]
