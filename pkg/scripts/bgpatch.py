"""
背景补丁攻击命令行

子命令：toy-train / attack / baseline / eval / transfer / ablate
"""
import sys
sys.path.append('.')

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

from config.setting import Settings
from src.attack.baseline import random_baseline
from src.core.geometry import rasterize
from src.data_loader.annotations import DatasetSample, ingest_annotations
from src.data_loader.synthetic_shapes import generate_shapes_dataset, write_coco_dataset
from src.detector.toy_ssm import ToySSM
from src.detector.trainer import toy_ssm_build
from src.evaluation.harness import CLEAN, RANDOM, EvalReport, EvaluationHarness
from src.evaluation.metrics import psnr
from src.storage.artifact_store import ArtifactStore

logger = logging.getLogger(__name__)


class BgPatchPipeline:
    """命令行各子命令共享的数据、检测器与存储准备"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.settings = Settings.load(getattr(args, 'config', None), overrides=self._overrides(args))
        self.eval_cfg = self.settings.eval_config()
        self.attack_cfg = self.settings.attack_config(seed=args.seed)
        self.store = ArtifactStore(self.eval_cfg.output_dir)
        logger.info(f"✅ 初始化完成 (输出目录: {self.eval_cfg.output_dir})")

    @staticmethod
    def _overrides(args: argparse.Namespace) -> Dict:
        mapping = {
            'losses': 'LOSSES',
            'target_class': 'TARGET_CLASS',
            'psnr_floor': 'PSNR_FLOOR',
            'max_iter': 'MAX_ITER',
            'lambda_reference_side': 'LAMBDA_REFERENCE_SIDE',
            'workers': 'WORKERS',
            'output': 'OUTPUT_DIR',
        }
        overrides = {key: getattr(args, attr, None) for attr, key in mapping.items()}
        if getattr(args, 'pseudo_gt', False):
            overrides['PSEUDO_GT'] = 'true'
        return overrides

    def samples(self) -> List[DatasetSample]:
        args = self.args
        if args.annotations:
            ingest = ingest_annotations(args.annotations, image_root=args.image_root,
                                        subsample=args.subsample, seed=args.seed)
            samples = ingest.samples
        else:
            samples = generate_shapes_dataset(args.synthetic, seed=args.seed + 20_000, prefix='eval')
        if args.image_id:
            samples = [s for s in samples if s.image_id == args.image_id]
            if not samples:
                raise ValueError(f"找不到图像: {args.image_id}")
        return samples

    def detector(self, path: Optional[str] = None) -> ToySSM:
        path = path or self.args.detector
        if not path:
            raise ValueError("需要通过 --detector 指定检测器权重文件")
        return ToySSM.load(path)

    def harness(self, detector: Optional[ToySSM] = None) -> EvaluationHarness:
        return EvaluationHarness(detector or self.detector(), self.attack_cfg, self.eval_cfg, self.store)

    # ------------------------------------------------------------------

    def attack(self):
        samples = self.samples()
        harness = self.harness()
        report = harness.run(samples, with_baseline=False, with_groups=False)
        harness.write_report('attack', report)

    def baseline(self):
        """用已保存的攻击补丁与 PSNR 生成随机噪声基线；缺失时先执行攻击"""
        samples = self.samples()
        harness = self.harness()
        missing = [s for s in samples if not self.store.path('patches', f"attacked_{s.image_id}.json").exists()]
        if missing:
            logger.info(f"🔧 {len(missing)} 张图像没有攻击产物，先执行攻击")
            harness.attack_dataset(missing)

        report = EvalReport(metadata=harness.metadata(samples, 'baseline'))
        clean_images = [s.load_image() for s in samples]
        random_images = []
        for idx, (sample, clean) in enumerate(zip(samples, clean_images)):
            name = f"attacked_{sample.image_id}"
            try:
                patches = self.store.load_patches(name)
                adv = self.store.load_image(name)
            except FileNotFoundError as e:
                report.errors.append(f"{sample.image_id}: {e}")
                random_images.append(clean)
                continue
            if len(patches) == 0:
                random_images.append(clean)
                continue
            target = psnr(clean, adv, rasterize(patches, clean.dims))
            noisy = random_baseline(clean, patches, target, seed=self.attack_cfg.seed + idx)
            self.store.save_image(f"random_{sample.image_id}", noisy)
            random_images.append(noisy)

        report.conditions[CLEAN] = harness.evaluate_condition(CLEAN, samples, clean_images)
        report.conditions[RANDOM] = harness.evaluate_condition(RANDOM, samples, random_images)
        harness.write_report('baseline', report)

    def evaluate(self):
        samples = self.samples()
        harness = self.harness()
        experiment = self.args.experiment
        if experiment == 'clean':
            report = harness.evaluate_clean(samples)
        elif experiment == 'loss-table':
            report = harness.loss_table(samples)
        elif experiment == 'targeted':
            report = harness.targeted(samples)
        else:
            report = harness.run(samples, with_baseline=True, with_groups=True)
        harness.write_report(experiment.replace('-', '_'), report)

    def transfer(self):
        samples = self.samples()
        paths = self.args.detectors
        detectors = {Path(p).stem: self.detector(p) for p in paths}
        harness = self.harness(next(iter(detectors.values())))
        matrix = harness.transfer(samples, detectors)
        report = EvalReport(metadata=harness.metadata(samples, 'transfer'))
        report.transfer = {src: row.to_dict() for src, row in matrix.iterrows()}
        self.store.save_report('transfer', report.to_dict(), rows=matrix)
        logger.info(f"\n📊 迁移矩阵 (mAP):\n{matrix.round(4).to_string()}")

    def ablate(self):
        samples = self.samples()
        harness = self.harness()
        if self.args.kind == 'distance-sweep':
            curve = harness.distance_sweep(samples, self.args.distances)
            report = EvalReport(metadata=harness.metadata(samples, 'distance_sweep'))
            report.distance_curve = curve.to_rows()
            report.metadata['skipped_distances'] = curve.skipped
            harness.write_report('ablate_distance', report)
        else:
            report = harness.run(samples, with_baseline=False, with_groups=True)
            harness.write_report('ablate_groups', report)


def toy_train(args: argparse.Namespace):
    settings = Settings.load(args.config, overrides={
        'TOY_TRAIN_IMAGES': args.images,
        'TOY_EPOCHS': args.epochs,
    })
    detector = toy_ssm_build(args.seed, stage_kind=args.stage, config=settings.toy_train_config())
    detector.save(args.out)
    if args.dataset_dir:
        samples = generate_shapes_dataset(args.dataset_images, seed=args.seed + 20_000, prefix='eval')
        write_coco_dataset(samples, args.dataset_dir)


def _add_data_args(p: argparse.ArgumentParser):
    p.add_argument('--detector', type=str, help='玩具检测器权重文件')
    p.add_argument('--annotations', type=str, help='COCO 风格标注 JSON')
    p.add_argument('--image-root', type=str, help='图像目录（默认与标注同目录）')
    p.add_argument('--subsample', type=int, help='随机抽取的图像数量')
    p.add_argument('--synthetic', type=int, default=100, help='未给标注时生成的合成图像数量')
    p.add_argument('--image-id', type=str, help='只处理这一张图像')
    p.add_argument('--losses', type=str, help='损失组合，如 tpc+tps+fpc')
    p.add_argument('--target-class', type=int, help='定向误检类别')
    p.add_argument('--pseudo-gt', action='store_true', help='以干净图像的检测结果作为真值')
    p.add_argument('--psnr-floor', type=float, help='PSNR 下限 (dB)')
    p.add_argument('--max-iter', type=int, help='最大迭代次数')
    p.add_argument('--lambda-reference-side', type=float, help='λ 对应的图像短边，按图像尺寸缩放步长')
    p.add_argument('--workers', type=int, help='并行线程数')
    p.add_argument('--output', type=str, help='输出目录')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='背景补丁对抗攻击')
    parser.add_argument('--config', type=str, help='KEY=VALUE 配置文件')
    parser.add_argument('--seed', type=int, default=0, help='随机种子')
    parser.add_argument('--verbose', action='store_true', help='输出调试日志')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('toy-train', help='训练玩具检测器')
    p.add_argument('--stage', choices=['single-stage', 'two-stage-rpn'], default='single-stage')
    p.add_argument('--out', type=str, required=True, help='权重输出路径')
    p.add_argument('--images', type=int, help='训练图像数量')
    p.add_argument('--epochs', type=int, help='训练轮数')
    p.add_argument('--dataset-dir', type=str, help='同时写出一份合成评估数据集')
    p.add_argument('--dataset-images', type=int, default=100)

    for name, help_text in (
        ('attack', '批量 / 单张攻击'),
        ('baseline', '随机噪声基线'),
        ('eval', 'mAP / 误检评估'),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_data_args(p)
        if name == 'eval':
            p.add_argument('--experiment', choices=['clean', 'attack', 'loss-table', 'targeted'], default='attack')

    p = sub.add_parser('transfer', help='迁移攻击矩阵')
    _add_data_args(p)
    p.add_argument('--detectors', nargs='+', required=True, help='参与迁移的检测器权重文件')

    p = sub.add_parser('ablate', help='消融实验')
    _add_data_args(p)
    p.add_argument('--kind', choices=['distance-sweep', 'groups'], default='groups')
    p.add_argument('--distances', type=float, nargs='+', default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    return parser


def main(argv: Optional[List[str]] = None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    if args.command == 'toy-train':
        toy_train(args)
        return

    pipeline = BgPatchPipeline(args)
    actions = {
        'attack': pipeline.attack,
        'baseline': pipeline.baseline,
        'eval': pipeline.evaluate,
        'transfer': pipeline.transfer,
        'ablate': pipeline.ablate,
    }
    actions[args.command]()


if __name__ == "__main__":
    main()
