import json

import numpy as np
import pytest
from PIL import Image

from src.attack.patch_geometry import GeometryConfig, cluster_objects
from src.core.geometry import box_min_distance
from src.data_loader.annotations import ingest_annotations
from src.data_loader.synthetic_shapes import generate_shapes_dataset, write_coco_dataset


def write_json(path, data):
    path.write_text(json.dumps(data), encoding='utf-8')
    return str(path)


@pytest.fixture
def image_dir(tmp_path):
    for name in ('a.png', 'b.png', 'c.png'):
        Image.fromarray(np.full((20, 30, 3), 50, dtype=np.uint8)).save(tmp_path / name)
    return tmp_path


def test_ingest_converts_top_left_boxes_and_remaps_categories(image_dir):
    path = write_json(image_dir / 'ann.json', {
        'images': [{'id': 7, 'file_name': 'a.png', 'width': 30, 'height': 20}],
        'annotations': [
            {'id': 1, 'image_id': 7, 'category_id': 9, 'bbox': [3, 4, 4, 2]},
            {'id': 2, 'image_id': 7, 'category_id': 5, 'bbox': [10, 10, 6, 6]},
            {'id': 3, 'image_id': 7, 'category_id': 5, 'bbox': [0, 0, 30, 20], 'iscrowd': 1},
        ],
        'categories': [{'id': 5, 'name': 'car'}, {'id': 9, 'name': 'person'}],
    })
    result = ingest_annotations(path)
    assert result.errors == []
    assert result.category_map == {5: 1, 9: 2}
    sample = result.samples[0]
    assert sample.image_id == '7'
    assert len(sample.gt) == 2
    first = sample.gt.boxes[0]
    assert (first.cx, first.cy, first.w, first.h) == (5, 5, 4, 2)
    assert sample.gt.labels == (2, 1)
    assert sample.load_image().dims == (20, 30)


def test_ingest_records_missing_files_and_bad_entries(image_dir):
    path = write_json(image_dir / 'ann.json', {
        'images': [
            {'id': 1, 'file_name': 'a.png', 'width': 30, 'height': 20},
            {'id': 2, 'file_name': 'missing.png', 'width': 30, 'height': 20},
        ],
        'annotations': [
            {'id': 1, 'image_id': 1, 'category_id': 1, 'bbox': [0, 0, 0, 5]},
            {'id': 2, 'image_id': 42, 'category_id': 1, 'bbox': [0, 0, 5, 5]},
        ],
        'categories': [{'id': 1}],
    })
    result = ingest_annotations(path)
    assert [s.image_id for s in result.samples] == ['1']
    assert len(result.samples[0].gt) == 0
    assert len(result.errors) == 3


def test_ingest_rejects_invalid_json(tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json', encoding='utf-8')
    with pytest.raises(ValueError):
        ingest_annotations(str(bad))
    with pytest.raises(ValueError):
        ingest_annotations(write_json(tmp_path / 'list.json', []))


def test_subsample_is_reproducible(image_dir):
    path = write_json(image_dir / 'ann.json', {
        'images': [
            {'id': i, 'file_name': name, 'width': 30, 'height': 20}
            for i, name in enumerate(('a.png', 'b.png', 'c.png'), start=1)
        ],
        'annotations': [],
        'categories': [],
    })
    first = [s.image_id for s in ingest_annotations(path, subsample=2, seed=3).samples]
    again = [s.image_id for s in ingest_annotations(path, subsample=2, seed=3).samples]
    assert first == again and len(first) == 2


def test_synthetic_dataset_survives_coco_export(tmp_path):
    samples = generate_shapes_dataset(3, seed=21)
    ann_path = write_coco_dataset(samples, str(tmp_path / 'ds'), num_object_classes=3)
    result = ingest_annotations(ann_path)
    assert len(result.samples) == 3
    for original, loaded in zip(samples, result.samples):
        assert loaded.gt.labels == original.gt.labels
        assert np.allclose(loaded.gt.boxes_array(), original.gt.boxes_array())
        assert np.array_equal(loaded.load_image().pixels, original.load_image().pixels)


def test_synthetic_dataset_is_seeded():
    a = generate_shapes_dataset(2, seed=8)
    b = generate_shapes_dataset(2, seed=8)
    assert [s.gt for s in a] == [s.gt for s in b]
    assert np.array_equal(a[0].load_image().pixels, b[0].load_image().pixels)
    for sample in a:
        assert 1 <= len(sample.gt) <= 4
        assert all(1 <= label <= 3 for label in sample.gt.labels)


def test_crowded_scenes_form_one_cluster():
    for sample in generate_shapes_dataset(20, seed=3, crowd_fraction=1.0):
        assert len(sample.gt) == 4
        boxes = sample.gt.boxes
        assert all(0 <= b.x1 and b.x2 <= 96 and 0 <= b.y1 and b.y2 <= 96 for b in boxes)
        # 0-1 与 2-3 横向相邻，0-2 与 1-3 纵向相邻
        for i, j in ((0, 1), (2, 3), (0, 2), (1, 3)):
            assert 2 <= box_min_distance(boxes[i], boxes[j]) <= 6
        groups = cluster_objects(sample.gt, (96, 96), GeometryConfig())
        assert len(groups) == 1


def test_sparse_scenes_keep_objects_apart():
    for sample in generate_shapes_dataset(30, seed=4, crowd_fraction=0.0):
        assert 1 <= len(sample.gt) <= 3
        boxes = sample.gt.boxes
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert box_min_distance(boxes[i], boxes[j]) >= 20
        groups = cluster_objects(sample.gt, (96, 96), GeometryConfig())
        assert len(groups) == len(boxes)


def test_crowd_fraction_is_validated():
    with pytest.raises(ValueError):
        generate_shapes_dataset(1, seed=0, crowd_fraction=1.5)
