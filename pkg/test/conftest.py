import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.core.types import BoxCWH, GroundTruth, ImageBuffer  # noqa: E402
from src.detector.toy_ssm import build_untrained  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False, help='运行玩具规模的验收趋势测试')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 需要训练玩具检测器的长时间测试')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip = pytest.mark.skip(reason='需要 --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope='session')
def untrained_detector():
    return build_untrained(seed=0)


@pytest.fixture(scope='session')
def untrained_rpn():
    return build_untrained(seed=1, stage_kind='two-stage-rpn')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gt_from_detection(detector, img, region=46.0, label=None):
    """把一条落在左上区域内的检测当作真值，保证 z 至少选中它"""
    out = detector.forward(img)
    boxes = out.boxes
    x1 = boxes[:, 0] - boxes[:, 2] / 2
    y1 = boxes[:, 1] - boxes[:, 3] / 2
    x2 = boxes[:, 0] + boxes[:, 2] / 2
    y2 = boxes[:, 1] + boxes[:, 3] / 2
    inside = (x1 >= 2) & (y1 >= 2) & (x2 <= region) & (y2 <= region)
    candidates = np.flatnonzero(inside)
    assert candidates.size > 0
    best = candidates[np.argmax(out.scores[candidates, 1:].max(axis=1))]
    if label is None:
        label = int(np.argmax(out.scores[best, 1:])) + 1
    return GroundTruth(boxes=(BoxCWH.from_array(boxes[best]),), labels=(label,))


@pytest.fixture
def scene_image(rng):
    return ImageBuffer(rng.uniform(10.0, 245.0, size=(96, 96, 3)))


@pytest.fixture
def scene_gt(untrained_detector, scene_image):
    return gt_from_detection(untrained_detector, scene_image)
