import os

import numpy as np
import pytest

from src.augment import augment, crop_window, restore
from src.helpers.dataset import Dataset, DatasetSpec, image_key, label_key, write_dataset
from src.scene import (
    SOURCE_APPEARANCE, TARGET_APPEARANCE, SceneSpec, generate_domain, render_sample, segment_distance,
)
from src.utils.errors import ConfigError, ContractError, PnmParseError, ShapeError
from src.utils.metrics import cumulative_iou, iou
from src.utils.pnm import decode_pnm, encode_pnm, read_image, read_label, write_image, write_label


# scenes

@pytest.mark.parametrize('p0,p1', [((5, 0), (5, 63)), ((0, 17), (63, 17)), ((0, 0), (63, 63))])
def test_width_one_line_covers_one_pixel_per_step(p0, p1):
    label = segment_distance(p0, p1, 64) <= 0.5
    assert label.sum() == 64


def test_samples_are_deterministic():
    spec = SceneSpec('target', TARGET_APPEARANCE, seed=3)
    a, b = render_sample(spec, 7), render_sample(spec, 7)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)
    assert not np.array_equal(a.image, render_sample(spec, 8).image)


def test_sample_contents():
    sample = render_sample(SceneSpec('source', SOURCE_APPEARANCE), 0)
    assert sample.image.shape == (3, 64, 64)
    assert sample.label.shape == (64, 64) and sample.label.dtype == np.uint8
    assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
    assert 64 <= sample.label.sum()
    assert set(np.unique(sample.label)) <= {0, 1}


def test_domains_differ_in_brightness():
    source = generate_domain(SceneSpec('source', SOURCE_APPEARANCE), 10, workers=2)
    target = generate_domain(SceneSpec('target', TARGET_APPEARANCE), 10, workers=2)
    assert np.mean([s.image.mean() for s in source]) > np.mean([s.image.mean() for s in target]) + 0.2


def test_generation_offset_matches_single_render():
    spec = SceneSpec('source', SOURCE_APPEARANCE, size=32)
    np.testing.assert_array_equal(generate_domain(spec, 3, start=2)[0].image, render_sample(spec, 2).image)


@pytest.mark.parametrize('kwargs', [{'size': 48}, {'widths': (1, 4)}, {'lines': (0, 2)}, {'domain': 'other'}])
def test_scene_spec_validation(kwargs):
    values = {'domain': 'source', 'appearance': SOURCE_APPEARANCE}
    values.update(kwargs)
    with pytest.raises(ContractError):
        SceneSpec(**values)


# augmentation

def test_extras_follow_the_geometry(rng):
    image = rng.random((3, 16, 16))
    label = (rng.random((16, 16)) < 0.2).astype(np.uint8)
    aug = augment(image, label, rng, 8, extras={'label': label.astype(np.float64)})
    np.testing.assert_array_equal(aug.extras['label'], aug.label)
    assert aug.image.shape == (3, 8, 8)
    assert 0.0 <= aug.image.min() and aug.image.max() <= 1.0


def test_restore_writes_back_into_the_window(rng):
    full = rng.random((2, 16, 16))
    aug = augment(rng.random((3, 16, 16)), None, rng, 8, extras={'p': full})
    assert aug.label is None
    np.testing.assert_array_equal(restore(aug.extras['p'], full, aug.transform), full)
    changed = restore(np.zeros((2, 8, 8)), full, aug.transform)
    assert (changed == 0).sum() == 2 * 64
    assert changed.shape == full.shape


def test_crop_prefers_windows_with_lines(rng):
    label = np.zeros((64, 64), dtype=np.uint8)
    label[:, 40] = 1
    hits = 0
    for _ in range(20):
        top, left = crop_window(rng, 64, 64, 32, label)
        hits += label[top:top + 32, left:left + 32].any()
    assert hits >= 19


def test_crop_larger_than_image(rng):
    with pytest.raises(ContractError):
        crop_window(rng, 8, 8, 16)


# pnm

def test_pgm_with_comments():
    samples, maxval = decode_pnm(b'P5\n# made by hand\n2 2 # size\n255\n\x00\x01\x02\xff')
    assert maxval == 255
    np.testing.assert_array_equal(samples, [[0, 1], [2, 255]])


def test_sixteen_bit_samples_are_big_endian():
    samples, maxval = decode_pnm(b'P5 1 2 65535 \x01\x00\xff\xff')
    assert maxval == 65535
    np.testing.assert_array_equal(samples, [[256], [65535]])


def test_ppm_round_trip(rng):
    samples = rng.integers(0, 256, size=(3, 5, 3)).astype(np.uint8)
    decoded, _ = decode_pnm(encode_pnm(samples))
    np.testing.assert_array_equal(decoded, samples)


@pytest.mark.parametrize('data,offset', [
    (b'P3\n1 1\n255\n\x00', 0),
    (b'P5\n1 1\n0\n\x00', 8),
    (b'P5\n2 2\n255\n\x00', 12),
    (b'P5\n1 1\n7\n\x09', 9),
    (b'P5\nx 1\n255\n\x00', 3),
])
def test_malformed_pnm(data, offset):
    with pytest.raises(PnmParseError) as e:
        decode_pnm(data)
    assert e.value.offset == offset


def test_image_and_label_files(tmp_path, rng):
    image = rng.random((3, 4, 6))
    write_image(str(tmp_path / 'a.ppm'), image)
    np.testing.assert_array_equal(read_image(str(tmp_path / 'a.ppm')), np.round(image * 255) / 255)
    label = (rng.random((4, 6)) < 0.5).astype(np.uint8)
    write_label(str(tmp_path / 'a.pgm'), label)
    np.testing.assert_array_equal(read_label(str(tmp_path / 'a.pgm')), label)
    with pytest.raises(ShapeError):
        read_label(str(tmp_path / 'a.ppm'))


# metrics

def test_iou_half():
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[:2, :2] = 1
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[0, :2] = 1
    assert iou(pred, gt) == 0.5


def test_iou_of_empty_masks():
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert iou(np.ones((3, 3)), np.zeros((3, 3))) == 0.0


def test_cumulative_iou_sums_counts():
    a = (np.array([[1, 0]]), np.array([[1, 0]]))
    b = (np.array([[1, 1]]), np.array([[0, 0]]))
    assert cumulative_iou([a, b]) == pytest.approx(1 / 3)


def test_iou_shape_mismatch():
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


# dataset

def test_dataset_layout(tiny_dataset):
    dataset = Dataset(tiny_dataset)
    assert len(dataset.source_keys) == 6
    assert dataset.target_train_keys == [image_key('target', i) for i in range(4)]
    assert dataset.target_val_keys == ['target/images/0004.ppm', 'target/images/0005.ppm']
    assert label_key('target/images/0004.ppm') == 'target/labels/0004.pgm'
    assert os.path.isfile(dataset.path('source/images/0005.ppm'))


def test_dataset_files_match_the_renderer(tiny_dataset):
    dataset = Dataset(tiny_dataset)
    sample = render_sample(dataset.spec.scene('target'), 3)
    np.testing.assert_array_equal(dataset.image('target/images/0003.ppm'), np.round(sample.image * 255) / 255)
    np.testing.assert_array_equal(dataset.label('target/images/0003.ppm'), sample.label)


def test_dataset_needs_a_spec(tmp_path):
    with pytest.raises(ConfigError):
        Dataset(str(tmp_path))


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(n_target=10, n_val=10)


def test_write_dataset_counts(tmp_path):
    assert write_dataset(DatasetSpec(size=32, n_source=2, n_target=3, n_val=1), str(tmp_path)) == 5
    assert Dataset(str(tmp_path)).spec.n_target == 3
