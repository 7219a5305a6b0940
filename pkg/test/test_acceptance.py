"""
玩具规模的验收测试：训练小检测器后按验收阈值检查攻击效果

默认跳过，使用 pytest --run-slow 运行。
"""
import pytest

from src.attack.optimizer import AttackConfig
from src.attack.transfer import CLEAN_ROW
from src.data_loader.synthetic_shapes import generate_shapes_dataset
from src.detector.outputs import LossWeights
from src.detector.trainer import ToyTrainConfig, toy_ssm_build
from src.evaluation.ablation import relative_drop
from src.evaluation.harness import ATTACKED, CLEAN, RANDOM, EvalConfig, EvaluationHarness

pytestmark = pytest.mark.slow

# 96×96 的合成图像按 500 像素参考边长缩放步长
ATTACK = AttackConfig(lam_reference_side=500.0)
EVAL = EvalConfig(workers=4)


@pytest.fixture(scope='module')
def trained():
    return toy_ssm_build(seed=0, config=ToyTrainConfig())


@pytest.fixture(scope='module')
def eval_samples():
    return generate_shapes_dataset(100, seed=20_000, prefix='eval')


@pytest.fixture(scope='module')
def main_report(trained, eval_samples):
    harness = EvaluationHarness(trained, ATTACK, EVAL)
    return harness.run(eval_samples, with_baseline=True, with_groups=True)


def test_toy_detector_learns(trained):
    assert trained.info['clean_map_50'] >= 0.7


def test_attack_drops_map_within_psnr_budget(main_report):
    assert main_report.metadata['num_images'] >= 100
    assert main_report.relative_drop(ATTACKED) >= 0.40
    assert main_report.psnr_stats['below_floor'] == 0


def test_random_noise_barely_moves_map(main_report):
    assert abs(main_report.relative_drop(RANDOM)) < 0.05


def test_small_objects_suffer_more(main_report):
    rows = {r['group']: r for r in main_report.scale_groups}
    assert rows['SG_1']['relative_drop'] > rows['SG_4']['relative_drop']


def test_crowded_images_get_fewer_patches_per_object(main_report):
    values = [r['patches_per_object'] for r in main_report.distance_groups]
    assert all(v is not None for v in values)
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_fpc_only_doubles_false_positives(trained, eval_samples):
    cfg = ATTACK.with_updates(loss_weights=LossWeights.from_combo('fpc'))
    report = EvaluationHarness(trained, cfg, EVAL).run(eval_samples, with_baseline=False, with_groups=False)
    clean_fp = sum(report.conditions[CLEAN].fp_counts)
    assert sum(report.conditions[ATTACKED].fp_counts) >= 2 * max(clean_fp, 1)


def test_targeted_attack_plants_target_class(trained, eval_samples, main_report):
    report = EvaluationHarness(trained, ATTACK, EVAL).targeted(eval_samples, target=2)
    assert report.metadata['attack']['losses'] == 'fpc'
    assert report.targeted['fraction'] >= 0.8
    assert report.relative_drop(ATTACKED) < main_report.relative_drop(ATTACKED)


def test_far_patches_hurt_less(trained, eval_samples):
    harness = EvaluationHarness(trained, ATTACK, EVAL)
    curve = harness.distance_sweep(eval_samples[:40], [0.0, 0.5, 1.0])
    assert not curve.skipped
    values = [p.mean_ap for p in sorted(curve.points, key=lambda p: p.distance)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_white_box_beats_transfer(trained, eval_samples):
    other = toy_ssm_build(seed=1, config=ToyTrainConfig())
    harness = EvaluationHarness(trained, ATTACK, EVAL)
    matrix = harness.transfer(eval_samples[:40], {'seed0': trained, 'seed1': other})
    for target in ('seed0', 'seed1'):
        source_other = 'seed1' if target == 'seed0' else 'seed0'
        clean = matrix.loc[CLEAN_ROW, target]
        white_box = relative_drop(clean, matrix.loc[target, target])
        transferred = relative_drop(clean, matrix.loc[source_other, target])
        assert white_box > transferred
