import numpy as np
import pytest

from src.attack.optimizer import AttackResult, TerminationReason
from src.attack.transfer import CLEAN_ROW, replay_patches, transfer_matrix
from src.core.geometry import rasterize
from src.core.types import BoxCWH, GroundTruth, ImageBuffer, Patch, PatchSet
from src.data_loader.synthetic_shapes import generate_shapes_dataset
from src.detector.toy_ssm import build_untrained

PATCHES = PatchSet(patches=(Patch(BoxCWH.from_xyxy(60, 60, 80, 72), 0),))


def make_result(clean, patches=PATCHES, value=200.0):
    pixels = clean.copy_pixels()
    pixels[rasterize(patches, clean.dims)] = value
    return AttackResult(
        adversarial_image=ImageBuffer(pixels),
        patches=patches,
        iterations_run=1,
        final_psnr=40.0,
        termination=TerminationReason.MAX_ITER,
        trace=(),
        gt=GroundTruth(),
        psnr_floor=30.0,
    )


def test_replay_on_source_image_reproduces_attack(rng):
    clean = ImageBuffer(rng.uniform(0, 255, size=(96, 96, 3)))
    result = make_result(clean)
    replayed = replay_patches(clean, result.patches, result)
    assert np.array_equal(replayed.pixels, result.adversarial_image.pixels)


def test_replay_keeps_pixels_outside_patches(rng):
    clean = ImageBuffer(rng.uniform(0, 255, size=(96, 96, 3)))
    other = ImageBuffer(rng.uniform(0, 255, size=(96, 96, 3)))
    result = make_result(clean)
    replayed = replay_patches(other, result.patches, result)
    mask = result.mask
    assert np.all(replayed.pixels[mask] == 200.0)
    assert np.array_equal(replayed.pixels[~mask], other.pixels[~mask])


def test_replay_rejects_size_mismatch(rng):
    clean = ImageBuffer(rng.uniform(0, 255, size=(96, 96, 3)))
    result = make_result(clean)
    with pytest.raises(ValueError):
        replay_patches(ImageBuffer(np.zeros((64, 64, 3))), result.patches, result)


def test_transfer_matrix_layout():
    samples = generate_shapes_dataset(2, seed=11)
    detectors = {'a': build_untrained(0), 'b': build_untrained(1)}
    attacks = {
        'a': [make_result(s.load_image()) for s in samples],
        'b': [None, None],
    }
    matrix = transfer_matrix(samples, detectors, attacks)
    assert list(matrix.index) == [CLEAN_ROW, 'a', 'b']
    assert list(matrix.columns) == ['a', 'b']
    assert matrix.index.name == 'source'
    assert ((matrix.values >= 0.0) & (matrix.values <= 1.0)).all()
    assert matrix.loc['b', 'a'] == pytest.approx(matrix.loc[CLEAN_ROW, 'a'])
