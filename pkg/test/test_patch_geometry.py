import numpy as np
import pytest

from src.attack.patch_geometry import (
    IMAGE_GROUP_ID,
    GeometryConfig,
    IntensityTable,
    candidate_shapes,
    cluster_objects,
    expand_patches,
    expand_stride,
    gradient_intensity,
    init_background_patches,
    init_patches,
)
from src.core.geometry import box_min_distance, boxes_overlap, inside_image
from src.core.types import BoxCWH, GroundTruth, Patch, PatchSet

CFG = GeometryConfig()


def gt_of(*boxes):
    return GroundTruth(boxes=tuple(boxes), labels=tuple(1 for _ in boxes))


def check_constraints(patches, gt, dims, cfg=CFG):
    for i, p in enumerate(patches):
        assert inside_image(p.box, dims)
        for g in gt.boxes:
            assert not boxes_overlap(p.box, g)
        for q in list(patches)[i + 1:]:
            assert not boxes_overlap(p.box, q.box)


def test_config_validation():
    with pytest.raises(ValueError):
        GeometryConfig(n_b=0)
    with pytest.raises(ValueError):
        GeometryConfig(init_scale=0.0)
    with pytest.raises(ValueError):
        GeometryConfig(fixed_distance=1.5)


def test_candidate_shapes_preserve_area():
    shapes = candidate_shapes(BoxCWH(50, 50, 50, 50), CFG)
    assert len(shapes) == 5
    assert shapes[0] == pytest.approx((10.0, 10.0))
    w, h = shapes[3]
    assert w == pytest.approx(12.247, abs=1e-3)
    assert h == pytest.approx(8.165, abs=1e-3)
    for w, h in shapes:
        assert w * h == pytest.approx(100.0)


def test_expand_stride():
    assert expand_stride((500, 600), CFG) == pytest.approx(10.0)


def test_single_object_is_one_group():
    groups = cluster_objects(gt_of(BoxCWH(50, 50, 10, 10)), (100, 100), CFG)
    assert len(groups) == 1
    assert groups[0].member_indices == (0,)


def test_no_objects_gives_no_groups():
    assert cluster_objects(GroundTruth(), (100, 100), CFG) == []


def test_clustering_chains_through_neighbours():
    a = BoxCWH.from_xyxy(0, 0, 10, 10)
    b = BoxCWH.from_xyxy(25, 0, 35, 10)
    c = BoxCWH.from_xyxy(50, 0, 60, 10)
    groups = cluster_objects(gt_of(a, b, c), (100, 100), CFG)
    assert len(groups) == 1
    assert groups[0].member_indices == (0, 1, 2)
    assert groups[0].bounding_region.to_xyxy() == pytest.approx((0, 0, 60, 10))


def test_clustering_separates_far_objects():
    a = BoxCWH.from_xyxy(0, 0, 10, 10)
    c = BoxCWH.from_xyxy(50, 0, 60, 10)
    groups = cluster_objects(gt_of(a, c), (100, 100), CFG)
    assert [g.member_indices for g in groups] == [(0,), (1,)]


def test_intensity_table_rect_sum(rng):
    intensity = rng.uniform(0, 1, size=(20, 30))
    table = IntensityTable(intensity)
    assert table.rect_sum(3, 11, 5, 17) == pytest.approx(intensity[3:11, 5:17].sum())
    assert table.rect_sum(-4, 2, 25, 40) == pytest.approx(intensity[0:2, 25:30].sum())
    assert table.rect_sum(5, 5, 0, 10) == 0.0


def test_gradient_intensity_is_channel_l1():
    grad = np.zeros((2, 2, 3))
    grad[0, 0] = [1.0, -2.0, 0.5]
    assert gradient_intensity(grad)[0, 0] == pytest.approx(3.5)


def test_zero_gradient_picks_row_major_positions():
    obj = BoxCWH.from_xyxy(40, 40, 60, 60)
    gt = gt_of(obj)
    dims = (100, 100)
    groups = cluster_objects(gt, dims, CFG)
    patches = init_patches(groups, gt, np.zeros((100, 100, 3)), dims, CFG)

    assert len(patches) == 3
    first = patches[0].box
    assert first.to_xyxy() == pytest.approx((0.0, 0.0, 4.0, 4.0))
    assert patches[1].box.y1 == pytest.approx(0.0)
    assert patches[1].box.x1 == pytest.approx(4.0, abs=1e-6)
    check_constraints(patches, gt, dims)


def test_init_respects_min_distance():
    obj = BoxCWH.from_xyxy(100, 100, 200, 200)
    gt = gt_of(obj)
    dims = (300, 300)
    rng = np.random.default_rng(5)
    grad = rng.normal(size=(300, 300, 3))
    groups = cluster_objects(gt, dims, CFG)
    patches = init_patches(groups, gt, grad, dims, CFG)
    assert len(patches) == 3
    for p in patches:
        assert box_min_distance(p.box, obj) >= 20.0 - 1e-9
        assert p.box.area == pytest.approx(400.0)
    check_constraints(patches, gt, dims)


def test_init_follows_gradient_and_is_deterministic():
    gt = gt_of(BoxCWH.from_xyxy(40, 40, 60, 60))
    dims = (100, 100)
    grad = np.zeros((100, 100, 3))
    grad[80:90, 80:90, :] = 1.0
    groups = cluster_objects(gt, dims, CFG)
    first = init_patches(groups, gt, grad, dims, CFG)
    again = init_patches(groups, gt, grad, dims, CFG)
    assert first == again
    box = first[0].box
    assert 80 <= box.cx <= 90 and 80 <= box.cy <= 90


def test_fixed_distance_ring():
    obj = BoxCWH.from_xyxy(40, 40, 60, 60)
    gt = gt_of(obj)
    dims = (100, 100)
    cfg = GeometryConfig(fixed_distance=0.5)
    groups = cluster_objects(gt, dims, cfg)
    patches = init_patches(groups, gt, np.zeros((100, 100, 3)), dims, cfg)
    assert len(patches) == 3
    for p in patches:
        dist = box_min_distance(p.box, obj)
        assert 10.0 - 1e-9 <= dist < 12.0


def test_background_patches_without_objects():
    gt = gt_of(BoxCWH.from_xyxy(0, 0, 30, 30))
    dims = (100, 100)
    patches = init_background_patches(gt, np.zeros((100, 100, 3)), dims, CFG)
    assert len(patches) == 3
    assert all(p.group_id == IMAGE_GROUP_ID for p in patches)
    assert patches[0].box.area == pytest.approx(400.0)
    check_constraints(patches, gt, dims)


def _single_patch(x1, y1, x2, y2, group_id=0):
    return PatchSet(patches=(Patch(BoxCWH.from_xyxy(x1, y1, x2, y2), group_id),))


def test_expansion_picks_strongest_strip():
    gt = gt_of(BoxCWH.from_xyxy(85, 85, 95, 95))
    dims = (100, 100)
    patches = _single_patch(40, 40, 50, 50)
    grad = np.zeros((100, 100, 3))
    grad[45, 38, 0] = 1.0   # left
    grad[45, 51, 0] = 2.0   # right
    grad[38, 45, 0] = 0.5   # top
    grad[51, 45, 0] = 2.0   # down

    expanded, decisions = expand_patches(patches, grad, gt, dims, CFG)
    assert decisions[0].direction == 'right'
    assert decisions[0].gain == pytest.approx(2.0)
    assert expanded[0].box.to_xyxy() == pytest.approx((40.0, 40.0, 52.0, 50.0))
    assert expanded[0].box.area > patches[0].box.area


def test_expansion_skips_border():
    dims = (100, 100)
    patches = _single_patch(0, 40, 10, 50)
    expanded, decisions = expand_patches(patches, np.zeros((100, 100, 3)), GroundTruth(), dims, CFG)
    assert decisions[0].direction == 'right'
    check_constraints(expanded, GroundTruth(), dims)


def test_expansion_blocked_everywhere_keeps_patch():
    dims = (100, 100)
    patches = _single_patch(0, 0, 100, 100)
    expanded, decisions = expand_patches(patches, np.ones((100, 100, 3)), GroundTruth(), dims, CFG)
    assert decisions[0].direction is None
    assert expanded == patches


def test_expansion_never_breaks_distance_or_overlap():
    obj = BoxCWH.from_xyxy(53, 40, 63, 50)
    gt = gt_of(obj)
    dims = (100, 100)
    patches = _single_patch(40, 40, 50, 50)
    grad = np.zeros((100, 100, 3))
    grad[40:50, 50:52, :] = 10.0
    expanded, decisions = expand_patches(patches, grad, gt, dims, CFG)
    assert decisions[0].direction != 'right'
    assert box_min_distance(expanded[0].box, obj) >= 2.0 - 1e-9


def test_expansion_keeps_patches_disjoint():
    dims = (100, 100)
    patches = PatchSet(patches=(
        Patch(BoxCWH.from_xyxy(10, 10, 20, 20), IMAGE_GROUP_ID),
        Patch(BoxCWH.from_xyxy(20, 10, 30, 20), IMAGE_GROUP_ID),
    ))
    grad = np.zeros((100, 100, 3))
    grad[10:20, 20:22, :] = 5.0
    expanded, decisions = expand_patches(patches, grad, GroundTruth(), dims, CFG)
    assert decisions[0].direction != 'right'
    check_constraints(expanded, GroundTruth(), dims)
