import math

import numpy as np
import pytest
import torch

from conftest import gt_from_detection
from src.core.types import BoxCWH, GroundTruth, ImageBuffer, Patch, PatchSet
from src.detector.offsets import decode_offsets, decode_tensor, encode_offsets, encode_tensor
from src.detector.outputs import LossWeights, NoActiveLossError, ScoredDetection, SsmOutputs
from src.detector.toy_ssm import ToySSM, build_untrained


@pytest.fixture
def image(scene_image):
    return scene_image


FAR_PATCHES = PatchSet(patches=(Patch(BoxCWH.from_xyxy(60, 60, 90, 90), 0),))


def random_boxes(rng, n):
    return np.column_stack([
        rng.uniform(0, 500, n),
        rng.uniform(0, 500, n),
        rng.uniform(1, 200, n),
        rng.uniform(1, 200, n),
    ])


def test_offsets_inverse():
    anchor = BoxCWH(20, 30, 12, 24)
    box = BoxCWH(25, 28, 10, 30)
    again = decode_offsets(anchor, encode_offsets(anchor, box))
    assert again.as_array() == pytest.approx(box.as_array(), abs=1e-9)


def test_encode_known_values():
    anchor = BoxCWH(10, 10, 10, 10)
    offsets = encode_offsets(anchor, BoxCWH(15, 10, 20, 10))
    assert offsets == pytest.approx((0.5, 0.0, math.log(2.0), 0.0), abs=1e-12)
    assert decode_offsets(anchor, (0.5, 0.0, math.log(2.0), 0.0)).as_array() == pytest.approx(
        [15.0, 10.0, 20.0, 10.0], abs=1e-12
    )


def test_round_trip_on_random_pairs(rng):
    anchors = random_boxes(rng, 1000)
    boxes = random_boxes(rng, 1000)
    for a, b in zip(anchors, boxes):
        anchor, box = BoxCWH.from_array(a), BoxCWH.from_array(b)
        again = decode_offsets(anchor, encode_offsets(anchor, box))
        assert np.max(np.abs(again.as_array() - b)) <= 1e-9

    anchors_t, boxes_t = torch.from_numpy(anchors), torch.from_numpy(boxes)
    again_t = decode_tensor(anchors_t, encode_tensor(anchors_t, boxes_t))
    assert torch.max(torch.abs(again_t - boxes_t)).item() <= 1e-9


def test_metadata_and_psnr_floor(untrained_detector, untrained_rpn):
    assert untrained_detector.metadata.num_object_classes == 3
    assert untrained_detector.metadata.default_psnr_floor == 30.0
    assert untrained_rpn.metadata.num_object_classes == 1
    assert untrained_rpn.metadata.default_psnr_floor == 35.0


def test_forward_shapes(untrained_detector, image):
    out = untrained_detector.forward(image)
    assert len(out) == 24 * 24 * 6
    assert out.scores.shape == (24 * 24 * 6, 4)
    assert np.allclose(out.scores.sum(axis=1), 1.0)
    assert np.all(out.boxes[:, 2:] > 0)


def test_forward_rejects_wrong_dims(untrained_detector):
    with pytest.raises(ValueError):
        untrained_detector.forward(ImageBuffer(np.zeros((64, 96, 3))))


def test_forward_does_not_change_weights(untrained_detector, image, scene_gt):
    before = {k: v.clone() for k, v in untrained_detector.net.state_dict().items()}
    untrained_detector.input_gradient(image, scene_gt, FAR_PATCHES, LossWeights())
    after = untrained_detector.net.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_save_and_load_round_trip(untrained_detector, image, tmp_path):
    path = tmp_path / 'toy.pt'
    untrained_detector.save(str(path))
    loaded = ToySSM.load(str(path))
    assert loaded.metadata == untrained_detector.metadata
    assert np.array_equal(loaded.forward(image).scores, untrained_detector.forward(image).scores)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / 'other.pt'
    torch.save({'format': 'something-else'}, path)
    with pytest.raises(ValueError):
        ToySSM.load(str(path))


def test_same_seed_same_detector(image):
    a = build_untrained(7).forward(image)
    b = build_untrained(7).forward(image)
    assert np.array_equal(a.scores, b.scores)


def test_detect_returns_labelled_detections(untrained_detector, image):
    dets = untrained_detector.detect(image, score_threshold=0.05)
    assert len(dets) <= 100
    assert all(isinstance(d, ScoredDetection) for d in dets)
    assert all(1 <= d.label <= 3 for d in dets)
    assert all(d.score >= 0.05 for d in dets)


def test_input_gradient_without_selections_raises(untrained_detector, image):
    with pytest.raises(NoActiveLossError):
        untrained_detector.input_gradient(image, GroundTruth(), PatchSet(), LossWeights.from_combo('tpc'))


def finite_difference_errors(detector, pixels, gt, weights, base, points, step=0.5):
    """逐像素的 |解析 − 中心差分| / (|中心差分| + 1e-8)"""
    errors = []
    for y, x, c in points:
        plus = pixels.copy()
        minus = pixels.copy()
        plus[y, x, c] += step
        minus[y, x, c] -= step
        f_plus = detector.objective(
            plus, gt, FAR_PATCHES, weights, selections=base.selections, with_grad=False
        ).breakdown.total
        f_minus = detector.objective(
            minus, gt, FAR_PATCHES, weights, selections=base.selections, with_grad=False
        ).breakdown.total
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = base.gradient[y, x, c]
        errors.append(abs(analytic - numeric) / (abs(numeric) + 1e-8))
    return np.array(errors)


def random_points(rng, count):
    return list(zip(rng.integers(0, 96, count), rng.integers(0, 96, count), rng.integers(0, 3, count)))


@pytest.mark.parametrize('combo', ['tpc', 'tps', 'tpc+tps', 'fpc'])
def test_gradient_matches_finite_differences(untrained_detector, image, scene_gt, combo):
    weights = LossWeights.from_combo(combo)
    base = untrained_detector.objective(image.pixels, scene_gt, FAR_PATCHES, weights)
    assert base.active
    if weights.uses_true_positives:
        assert base.selections.tp.count > 0
    if weights.use_fpc:
        assert base.selections.fp.count > 0

    points = random_points(np.random.default_rng(99), 20)
    errors = finite_difference_errors(
        untrained_detector, np.array(image.pixels), scene_gt, weights, base, points
    )
    assert errors.max() < 1e-3


def test_full_objective_gradient_on_several_images(untrained_detector):
    weights = LossWeights()
    checked = 0
    for seed in (11, 12, 13):
        rng = np.random.default_rng(seed)
        img = ImageBuffer(rng.uniform(10.0, 245.0, size=(96, 96, 3)))
        gt = gt_from_detection(untrained_detector, img)
        base = untrained_detector.objective(img.pixels, gt, FAR_PATCHES, weights)
        assert base.selections.tp.count > 0 and base.selections.fp.count > 0

        errors = finite_difference_errors(
            untrained_detector, np.array(img.pixels), gt, weights, base, random_points(rng, 100)
        )
        assert errors.max() < 1e-3
        checked += errors.size
    assert checked >= 300


def test_scaling_the_loss_scales_the_gradient(untrained_detector, image, scene_gt):
    weights = LossWeights()
    base = untrained_detector.objective(image.pixels, scene_gt, FAR_PATCHES, weights)
    tripled = untrained_detector.objective(
        image.pixels, scene_gt, FAR_PATCHES, weights.scaled(3.0), selections=base.selections
    )
    assert tripled.breakdown.total == pytest.approx(3.0 * base.breakdown.total, rel=1e-12)
    scale = np.abs(base.gradient).max()
    assert scale > 0
    assert np.allclose(tripled.gradient, 3.0 * base.gradient, rtol=1e-9, atol=1e-12 * scale)


def test_detection_records_decode_their_offsets(untrained_detector, image):
    out = untrained_detector.forward(image)
    records = out.detections
    assert len(records) == len(out)
    for j in (0, len(out) // 2, len(out) - 1):
        record = records[j]
        decoded = decode_offsets(record.anchor, record.pred_offsets)
        assert record.box.as_array() == pytest.approx(decoded.as_array(), abs=1e-9)
        assert record.top_class == int(np.argmax(out.scores[j]))
        assert record.scores.sum() == pytest.approx(1.0)


def test_outputs_leave_caller_arrays_writable():
    scores = np.array([[0.2, 0.8]])
    boxes = np.array([[10.0, 10.0, 4.0, 4.0]])
    from_caller = {'scores': scores, 'boxes': boxes, 'anchors': boxes.copy(), 'offsets': np.zeros((1, 4))}
    out = SsmOutputs(**from_caller)
    for arr in from_caller.values():
        assert arr.flags.writeable
    scores[0, 0] = 0.5
    assert out.scores[0, 0] == 0.2
    with pytest.raises(ValueError):
        out.scores[0, 0] = 0.1
