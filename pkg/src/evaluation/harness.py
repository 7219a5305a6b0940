"""
评估编排 - 干净 / 攻击 / 随机噪声条件下的 mAP、误检、分组消融与迁移
"""
from dataclasses import asdict, dataclass, field
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.attack.baseline import random_baseline
from src.attack.losses import TP_SCORE_THRESHOLD
from src.attack.optimizer import AttackConfig, AttackResult, run_attack
from src.attack.transfer import transfer_matrix
from src.core.types import GroundTruth, ImageBuffer
from src.data_loader.annotations import DatasetSample
from src.detector.interface import SingleShotDetector
from src.detector.outputs import LOSS_COMBOS, LossWeights, ScoredDetection
from src.evaluation.ablation import (
    DistanceCurve,
    distance_sweep_dataset,
    relative_drop,
    scale_group_ablation,
)
from src.evaluation.grouping import distance_groups, scale_groups
from src.evaluation.metrics import (
    AP_INTERPOLATION,
    MapResult,
    count_background_false_positives,
    mean_average_precision,
)
from src.evaluation.pool import run_batch
from src.storage.artifact_store import ArtifactStore, finite_or_none

logger = logging.getLogger(__name__)

CLEAN = 'no_noise'
RANDOM = 'random'
ATTACKED = 'attacked'

PATCHES_PER_OBJECT_NOTE = (
    "patches_per_object counts every patch placed for the image, "
    "without a per-object success criterion; images where no patch was placed are left out"
)
MEAN_DISTANCE_NOTE = (
    "mean_distance averages multi-object images only; it is null for a group made up "
    "entirely of single-object images"
)


@dataclass(frozen=True)
class EvalConfig:
    """
    评估配置

    Attributes:
        iou_thresholds: mAP 的 IoU 阈值
        score_threshold: 参与 PR 曲线的最低检测分数，默认与真正例选择的分数阈值相同
        fp_score_threshold: 统计背景误检的分数阈值
        nms_iou: 后处理 NMS 阈值
        scale_group_count / distance_group_count: 消融分组数
        workers: 并行线程数
    """

    iou_thresholds: Tuple[float, ...] = (0.5, 0.7)
    score_threshold: float = TP_SCORE_THRESHOLD
    fp_score_threshold: float = 0.5
    nms_iou: float = 0.45
    scale_group_count: int = 4
    distance_group_count: int = 5
    workers: int = 1
    output_dir: str = "./outputs"

    def __post_init__(self):
        if not self.iou_thresholds:
            raise ValueError("iou_thresholds 不能为空")
        for thr in self.iou_thresholds:
            if not 0.0 < thr < 1.0:
                raise ValueError(f"IoU 阈值必须在 (0, 1) 内: {thr}")
        if self.scale_group_count < 1 or self.distance_group_count < 1:
            raise ValueError("分组数必须 >= 1")
        if self.workers < 1:
            raise ValueError(f"workers 必须 >= 1: {self.workers}")


@dataclass
class ConditionResult:
    """一种输入条件（干净 / 攻击 / 随机噪声 …）下的检测评估"""

    name: str
    maps: Dict[float, MapResult]
    fp_counts: List[int]

    def summary(self) -> Dict:
        row = {'condition': self.name}
        for thr, result in self.maps.items():
            row[f"mAP@{thr}"] = result.mean_ap
        row['fp_total'] = int(sum(self.fp_counts))
        row['fp_mean'] = float(np.mean(self.fp_counts)) if self.fp_counts else 0.0
        return row

    def to_dict(self) -> Dict:
        return {
            **self.summary(),
            'per_class_ap': {
                str(thr): {str(c): ap for c, ap in r.per_class_ap.items()} for thr, r in self.maps.items()
            },
        }


@dataclass
class EvalReport:
    """一次评估运行的完整报告"""

    conditions: Dict[str, ConditionResult] = field(default_factory=dict)
    psnr_stats: Dict = field(default_factory=dict)
    scale_groups: List[Dict] = field(default_factory=list)
    distance_groups: List[Dict] = field(default_factory=list)
    distance_curve: List[Dict] = field(default_factory=list)
    targeted: Dict = field(default_factory=dict)
    transfer: Optional[Dict] = None
    metadata: Dict = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)

    def rows(self) -> List[Dict]:
        return [c.summary() for c in self.conditions.values()]

    def relative_drop(self, condition: str, iou_thr: float = 0.5) -> float:
        clean = self.conditions[CLEAN].maps[iou_thr].mean_ap
        return relative_drop(clean, self.conditions[condition].maps[iou_thr].mean_ap)

    def to_dict(self) -> Dict:
        return {
            'metadata': self.metadata,
            'conditions': {k: v.to_dict() for k, v in self.conditions.items()},
            'psnr': self.psnr_stats,
            'scale_groups': self.scale_groups,
            'distance_groups': self.distance_groups,
            'distance_curve': self.distance_curve,
            'targeted': self.targeted,
            'transfer': self.transfer,
            'errors': self.errors,
        }


class EvaluationHarness:
    """
    评估编排器

    同一检测器实例在工作线程间只读共享；报告汇总在主线程完成。
    """

    def __init__(
        self,
        detector: SingleShotDetector,
        attack_cfg: AttackConfig,
        eval_cfg: Optional[EvalConfig] = None,
        store: Optional[ArtifactStore] = None,
    ):
        self.detector = detector
        self.attack_cfg = attack_cfg
        self.eval_cfg = eval_cfg or EvalConfig()
        self.store = store
        logger.info(
            f"✅ EvaluationHarness 初始化完成 (stage={detector.metadata.stage_kind}, "
            f"C={detector.metadata.num_object_classes}, workers={self.eval_cfg.workers})"
        )

    # ------------------------------------------------------------------
    # 基础步骤
    # ------------------------------------------------------------------

    def eval_gts(self, samples: Sequence[DatasetSample]) -> List[GroundTruth]:
        """RPN 模式下所有真值统一为 object 类"""
        if self.detector.metadata.num_object_classes == 1:
            return [s.gt.with_labels(1) if len(s.gt) else s.gt for s in samples]
        return [s.gt for s in samples]

    def detect_all(self, images: Sequence[ImageBuffer]) -> List[List[ScoredDetection]]:
        return [
            self.detector.detect(img, score_threshold=self.eval_cfg.score_threshold, nms_iou=self.eval_cfg.nms_iou)
            for img in images
        ]

    def evaluate_condition(
        self,
        name: str,
        samples: Sequence[DatasetSample],
        images: Sequence[ImageBuffer],
        dets: Optional[Sequence[Sequence[ScoredDetection]]] = None,
    ) -> ConditionResult:
        gts = self.eval_gts(samples)
        if dets is None:
            dets = self.detect_all(images)
        maps = {thr: mean_average_precision(dets, gts, iou_thr=thr) for thr in self.eval_cfg.iou_thresholds}
        fp = count_background_false_positives(dets, gts, score_threshold=self.eval_cfg.fp_score_threshold)
        result = ConditionResult(name=name, maps=maps, fp_counts=fp)
        logger.info(
            f"📊 {name}: " + ", ".join(f"mAP@{t}={m.mean_ap:.4f}" for t, m in maps.items())
            + f", 背景误检={sum(fp)}"
        )
        return result

    def attack_dataset(
        self,
        samples: Sequence[DatasetSample],
        cfg: Optional[AttackConfig] = None,
        tag: str = ATTACKED,
    ) -> Tuple[List[Optional[AttackResult]], List[str]]:
        """逐图像攻击（可并行），失败项记录错误并以 None 占位"""
        cfg = cfg or self.attack_cfg

        def attack_one(sample: DatasetSample) -> AttackResult:
            result = run_attack(sample.load_image(), sample.gt, self.detector, cfg, image_id=sample.image_id)
            if self.store is not None:
                self.store.save_attack(f"{tag}_{sample.image_id}", result)
            return result

        return run_batch(
            attack_one, samples, workers=self.eval_cfg.workers,
            desc=f"攻击 ({cfg.loss_weights.combo_name})", names=[s.image_id for s in samples],
        )

    @staticmethod
    def adversarial_images(
        samples: Sequence[DatasetSample],
        results: Sequence[Optional[AttackResult]],
    ) -> List[ImageBuffer]:
        return [
            r.adversarial_image if r is not None else s.load_image()
            for s, r in zip(samples, results)
        ]

    def baseline_images(
        self,
        samples: Sequence[DatasetSample],
        results: Sequence[Optional[AttackResult]],
    ) -> List[ImageBuffer]:
        """与攻击相同补丁、相同 PSNR 的随机正态噪声图像"""
        images = []
        for idx, (sample, result) in enumerate(zip(samples, results)):
            clean = sample.load_image()
            if result is None or len(result.patches) == 0:
                images.append(clean)
                continue
            images.append(random_baseline(clean, result.patches, result.final_psnr, seed=self.attack_cfg.seed + idx))
        return images

    @staticmethod
    def psnr_stats(results: Sequence[Optional[AttackResult]]) -> Dict:
        done = [r for r in results if r is not None]
        finite = [r.final_psnr for r in done if math.isfinite(r.final_psnr)]
        terminations: Dict[str, int] = {}
        for r in done:
            terminations[r.termination.value] = terminations.get(r.termination.value, 0) + 1
        return {
            'num_attacked': len(done),
            'mean_psnr': finite_or_none(float(np.mean(finite))) if finite else None,
            'min_psnr': finite_or_none(float(np.min(finite))) if finite else None,
            'below_floor': sum(1 for r in done if r.final_psnr < r.psnr_floor),
            'mean_iterations': float(np.mean([r.iterations_run for r in done])) if done else 0.0,
            'mean_patches': float(np.mean([len(r.patches) for r in done])) if done else 0.0,
            'patch_shortfall': int(sum(r.patch_shortfall for r in done)),
            'terminations': terminations,
        }

    def targeted_stats(
        self,
        samples: Sequence[DatasetSample],
        dets: Sequence[Sequence[ScoredDetection]],
        target: int,
    ) -> Dict:
        """含至少一个目标类别背景误检（分数 ≥ fp_score_threshold）的图像比例"""
        counts = count_background_false_positives(
            dets, self.eval_gts(samples), score_threshold=self.eval_cfg.fp_score_threshold, target=target
        )
        hit = sum(1 for c in counts if c > 0)
        return {
            'target_class': target,
            'images_with_target_fp': hit,
            'fraction': hit / len(counts) if counts else 0.0,
            'total_target_fp': int(sum(counts)),
        }

    def metadata(self, samples: Sequence[DatasetSample], experiment: str) -> Dict:
        meta = self.detector.metadata
        weights = self.attack_cfg.loss_weights
        return {
            'experiment': experiment,
            'num_images': len(samples),
            'ap_interpolation': AP_INTERPOLATION,
            'iou_thresholds': list(self.eval_cfg.iou_thresholds),
            'score_threshold': self.eval_cfg.score_threshold,
            'fp_score_threshold': self.eval_cfg.fp_score_threshold,
            'detector': {
                'stage_kind': meta.stage_kind,
                'num_object_classes': meta.num_object_classes,
                'input_dims': list(meta.input_dims),
                'seed': getattr(self.detector, 'seed', None),
            },
            'attack': {
                'lambda': self.attack_cfg.lam,
                'lambda_reference_side': self.attack_cfg.lam_reference_side,
                'max_iter': self.attack_cfg.max_iter,
                'psnr_floor': self.attack_cfg.resolve_psnr_floor(self.detector),
                'losses': weights.combo_name,
                'target_class': weights.target_class,
                'pseudo_gt': self.attack_cfg.pseudo_gt,
                'geometry': asdict(self.attack_cfg.geometry),
                'seed': self.attack_cfg.seed,
            },
        }

    # ------------------------------------------------------------------
    # 实验
    # ------------------------------------------------------------------

    def evaluate_clean(self, samples: Sequence[DatasetSample]) -> EvalReport:
        """仅评估干净图像"""
        report = EvalReport(metadata=self.metadata(samples, 'clean'))
        images = [s.load_image() for s in samples]
        report.conditions[CLEAN] = self.evaluate_condition(CLEAN, samples, images)
        return report

    def run(
        self,
        samples: Sequence[DatasetSample],
        with_baseline: bool = True,
        with_groups: bool = True,
    ) -> EvalReport:
        """
        批量攻击并评估：干净 / 攻击 / 随机噪声三种条件

        Args:
            with_baseline: 是否加入相同几何、相同 PSNR 的随机噪声条件
            with_groups: 是否输出尺寸分组与间距分组
        """
        logger.info(f"\n{'='*60}")
        logger.info(f"🎯 批量攻击评估: {len(samples)} 张图像")
        logger.info(f"{'='*60}")

        report = EvalReport(metadata=self.metadata(samples, 'attack'))
        clean_images = [s.load_image() for s in samples]
        clean_dets = self.detect_all(clean_images)
        report.conditions[CLEAN] = self.evaluate_condition(CLEAN, samples, clean_images, clean_dets)

        results, errors = self.attack_dataset(samples)
        report.errors.extend(errors)
        report.psnr_stats = self.psnr_stats(results)

        adv_images = self.adversarial_images(samples, results)
        adv_dets = self.detect_all(adv_images)
        report.conditions[ATTACKED] = self.evaluate_condition(ATTACKED, samples, adv_images, adv_dets)

        if with_baseline:
            rnd_images = self.baseline_images(samples, results)
            report.conditions[RANDOM] = self.evaluate_condition(RANDOM, samples, rnd_images)

        target = self.attack_cfg.loss_weights.target_class
        if target is not None:
            report.targeted = self.targeted_stats(samples, adv_dets, target)
            logger.info(f"🎯 定向误检: {report.targeted['fraction']:.2%} 的图像含类别 {target} 的背景误检")

        if with_groups:
            self._add_groups(report, samples, results, clean_dets, adv_dets)

        logger.info(f"\n{'='*60}")
        thr = self._primary_iou()
        logger.info(f"✅ 评估完成: mAP@{thr} 相对下降 {report.relative_drop(ATTACKED, thr):.2%}")
        logger.info(f"{'='*60}\n")
        return report

    def _primary_iou(self) -> float:
        return 0.5 if 0.5 in self.eval_cfg.iou_thresholds else self.eval_cfg.iou_thresholds[0]

    def _add_groups(
        self,
        report: EvalReport,
        samples: Sequence[DatasetSample],
        results: Sequence[Optional[AttackResult]],
        clean_dets: Sequence[Sequence[ScoredDetection]],
        adv_dets: Sequence[Sequence[ScoredDetection]],
    ):
        gts = self.eval_gts(samples)
        sg = scale_groups(gts, count=self.eval_cfg.scale_group_count)
        report.scale_groups = scale_group_ablation(
            gts, clean_dets, adv_dets, sg, iou_thr=self._primary_iou()
        )

        dg = distance_groups(
            gts,
            [(s.height, s.width) for s in samples],
            count=self.eval_cfg.distance_group_count,
            patch_counts=[len(r.patches) if r is not None and len(r.patches) else None for r in results],
        )
        report.distance_groups = dg.to_rows()
        report.metadata['patches_per_object_note'] = PATCHES_PER_OBJECT_NOTE
        report.metadata['mean_distance_note'] = MEAN_DISTANCE_NOTE

    def targeted(self, samples: Sequence[DatasetSample], target: Optional[int] = None) -> EvalReport:
        """
        定向误检实验：只启用 FPC，c′ 固定为目标类别

        Args:
            target: 目标类别；缺省时使用攻击配置中的 target_class

        Raises:
            ValueError: 没有给出目标类别
        """
        target = target if target is not None else self.attack_cfg.loss_weights.target_class
        if target is None:
            raise ValueError("定向误检实验需要指定目标类别")
        cfg = self.attack_cfg.with_updates(loss_weights=LossWeights.from_combo('fpc', target_class=target))
        report = EvaluationHarness(self.detector, cfg, self.eval_cfg, self.store).run(
            samples, with_baseline=False, with_groups=False,
        )
        report.metadata['experiment'] = 'targeted'
        return report

    def loss_table(self, samples: Sequence[DatasetSample], combos: Sequence[str] = LOSS_COMBOS) -> EvalReport:
        """
        损失组合对比：No-Noise / Random / 各损失组合

        随机噪声条件使用完整组合 (tpc+tps+fpc) 攻击得到的补丁与 PSNR。
        """
        logger.info(f"\n{'='*60}")
        logger.info(f"📊 损失组合对比: {', '.join(combos)}")
        logger.info(f"{'='*60}")

        report = EvalReport(metadata=self.metadata(samples, 'loss_table'))
        clean_images = [s.load_image() for s in samples]
        report.conditions[CLEAN] = self.evaluate_condition(CLEAN, samples, clean_images)

        target = self.attack_cfg.loss_weights.target_class
        random_source: Optional[List[Optional[AttackResult]]] = None
        for combo in combos:
            cfg = self.attack_cfg.with_updates(loss_weights=LossWeights.from_combo(combo, target_class=target))
            results, errors = self.attack_dataset(samples, cfg=cfg, tag=combo.replace('+', '_'))
            report.errors.extend(f"[{combo}] {e}" for e in errors)
            images = self.adversarial_images(samples, results)
            report.conditions[combo] = self.evaluate_condition(combo, samples, images)
            if combo == 'tpc+tps+fpc' or random_source is None:
                random_source = results

        if random_source is not None:
            rnd_images = self.baseline_images(samples, random_source)
            report.conditions[RANDOM] = self.evaluate_condition(RANDOM, samples, rnd_images)
        return report

    def transfer(
        self,
        samples: Sequence[DatasetSample],
        detectors: Mapping[str, SingleShotDetector],
    ) -> pd.DataFrame:
        """在每个源检测器上攻击，再回放到所有目标检测器"""
        attacks: Dict[str, List[Optional[AttackResult]]] = {}
        for name, source in detectors.items():
            harness = EvaluationHarness(source, self.attack_cfg, self.eval_cfg, self.store)
            attacks[name], _ = harness.attack_dataset(samples, tag=f"src_{name}")
        return transfer_matrix(
            samples, detectors, attacks,
            iou_thr=self._primary_iou(),
            score_threshold=self.eval_cfg.score_threshold,
            nms_iou=self.eval_cfg.nms_iou,
        )

    def distance_sweep(self, samples: Sequence[DatasetSample], distances: Sequence[float]) -> DistanceCurve:
        return distance_sweep_dataset(
            samples, self.detector, self.attack_cfg, distances,
            iou_thr=self._primary_iou(),
            workers=self.eval_cfg.workers,
            score_threshold=self.eval_cfg.score_threshold,
            nms_iou=self.eval_cfg.nms_iou,
        )

    def write_report(self, name: str, report: EvalReport):
        """写出报告 JSON / CSV，以及可用的图表"""
        if self.store is None:
            return
        self.store.save_report(name, report.to_dict(), rows=report.rows())
        if report.scale_groups:
            self.store.save_table(f"{name}_scale_groups", report.scale_groups)
            self.store.plot_group_bars(report.scale_groups, name=f"{name}_scale_groups")
        if report.distance_groups:
            self.store.save_table(f"{name}_distance_groups", report.distance_groups)
        if report.distance_curve:
            self.store.save_table(f"{name}_distance_sweep", report.distance_curve)
            self.store.plot_distance_curve(report.distance_curve, name=f"{name}_distance_sweep")
