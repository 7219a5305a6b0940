"""
配置管理 - 扁平 KEY=VALUE 配置文件 + 命令行覆盖

配置文件用 python-dotenv 解析但不写入环境变量；随机种子只从命令行读取。
"""
from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values

from src.attack.optimizer import AttackConfig
from src.attack.patch_geometry import GeometryConfig
from src.detector.outputs import LossWeights
from src.detector.trainer import ToyTrainConfig
from src.evaluation.harness import EvalConfig

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, str] = {
    'LAMBDA': '30',
    'LAMBDA_REFERENCE_SIDE': '',
    'MAX_ITER': '250',
    'PSNR_FLOOR': '',
    'N_B': '3',
    'INIT_SCALE': '0.2',
    'ASPECT_RATIOS': '1,0.67,0.75,1.5,1.33',
    'MIN_DIST_FACTOR': '0.2',
    'EXPAND_STRIDE_FACTOR': '0.02',
    'CLUSTER_THRESHOLD_FACTOR': '0.2',
    'LOSSES': 'tpc+tps+fpc',
    'TARGET_CLASS': '',
    'PSEUDO_GT': 'false',
    'PSEUDO_GT_SCORE_FLOOR': '0.5',
    'IOU_THRESHOLDS': '0.5,0.7',
    'SCORE_THRESHOLD': '0.1',
    'FP_SCORE_THRESHOLD': '0.5',
    'NMS_IOU': '0.45',
    'SCALE_GROUPS': '4',
    'DISTANCE_GROUPS': '5',
    'WORKERS': '1',
    'OUTPUT_DIR': './outputs',
    'TOY_TRAIN_IMAGES': '1200',
    'TOY_EPOCHS': '50',
}

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off', ''}


@dataclass
class Settings:
    """合并后的配置（默认值 < 配置文件 < 命令行）"""

    values: Dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))
    source: Optional[str] = None

    @classmethod
    def load(
        cls,
        path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "Settings":
        """
        读取配置

        Args:
            path: 配置文件路径；None 时只用默认值
            overrides: 命令行覆盖（值为 None 的项忽略）

        Raises:
            FileNotFoundError: 指定的配置文件不存在
        """
        values = dict(DEFAULTS)
        if path is not None:
            if not Path(path).exists():
                raise FileNotFoundError(f"配置文件不存在: {path}")
            for key, value in dotenv_values(path).items():
                key = key.upper()
                if key not in DEFAULTS:
                    logger.warning(f"⚠️  忽略未知配置项: {key}")
                    continue
                values[key] = '' if value is None else value.strip()

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            key = key.upper()
            if key not in DEFAULTS:
                logger.warning(f"⚠️  忽略未知覆盖项: {key}")
                continue
            if isinstance(value, (list, tuple)):
                value = ','.join(str(v) for v in value)
            values[key] = str(value)

        logger.debug(f"配置加载完成 (source={path})")
        return cls(values=values, source=path)

    def raw(self, key: str) -> str:
        return self.values[key]

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as e:
            raise ValueError(f"配置项 {key} 不是数字: {self.values[key]!r}") from e

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as e:
            raise ValueError(f"配置项 {key} 不是整数: {self.values[key]!r}") from e

    def get_optional_float(self, key: str) -> Optional[float]:
        return self.get_float(key) if self.values[key] != '' else None

    def get_optional_int(self, key: str) -> Optional[int]:
        return self.get_int(key) if self.values[key] != '' else None

    def get_bool(self, key: str) -> bool:
        value = self.values[key].lower()
        if value in _TRUE:
            return True
        if value in _FALSE:
            return False
        raise ValueError(f"配置项 {key} 不是布尔值: {self.values[key]!r}")

    def get_floats(self, key: str) -> Tuple[float, ...]:
        try:
            return tuple(float(v) for v in self.values[key].split(',') if v.strip())
        except ValueError as e:
            raise ValueError(f"配置项 {key} 不是逗号分隔的数字: {self.values[key]!r}") from e

    # ------------------------------------------------------------------
    # 构造各模块配置
    # ------------------------------------------------------------------

    def geometry_config(self) -> GeometryConfig:
        return GeometryConfig(
            n_b=self.get_int('N_B'),
            init_scale=self.get_float('INIT_SCALE'),
            aspect_ratios=self.get_floats('ASPECT_RATIOS'),
            min_dist_factor=self.get_float('MIN_DIST_FACTOR'),
            expand_stride_factor=self.get_float('EXPAND_STRIDE_FACTOR'),
            cluster_threshold_factor=self.get_float('CLUSTER_THRESHOLD_FACTOR'),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights.from_combo(self.raw('LOSSES'), target_class=self.get_optional_int('TARGET_CLASS'))

    def attack_config(self, seed: int = 0) -> AttackConfig:
        return AttackConfig(
            lam=self.get_float('LAMBDA'),
            lam_reference_side=self.get_optional_float('LAMBDA_REFERENCE_SIDE'),
            max_iter=self.get_int('MAX_ITER'),
            psnr_floor=self.get_optional_float('PSNR_FLOOR'),
            geometry=self.geometry_config(),
            loss_weights=self.loss_weights(),
            pseudo_gt=self.get_bool('PSEUDO_GT'),
            pseudo_gt_score_floor=self.get_float('PSEUDO_GT_SCORE_FLOOR'),
            seed=seed,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            iou_thresholds=self.get_floats('IOU_THRESHOLDS'),
            score_threshold=self.get_float('SCORE_THRESHOLD'),
            fp_score_threshold=self.get_float('FP_SCORE_THRESHOLD'),
            nms_iou=self.get_float('NMS_IOU'),
            scale_group_count=self.get_int('SCALE_GROUPS'),
            distance_group_count=self.get_int('DISTANCE_GROUPS'),
            workers=self.get_int('WORKERS'),
            output_dir=self.raw('OUTPUT_DIR'),
        )

    def toy_train_config(self) -> ToyTrainConfig:
        return ToyTrainConfig(
            num_images=self.get_int('TOY_TRAIN_IMAGES'),
            epochs=self.get_int('TOY_EPOCHS'),
        )
