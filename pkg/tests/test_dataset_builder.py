import json

import numpy as np
import pandas as pd
import pytest

from applier import Patch, TransformSpec
from core import BinaryMask, BoundingBox, GroundTruthSet, ImageBuffer
from dataset_builder import (CanvasPolicy, DatasetManifest, PhysicalFrame, _stratified_quotas, aggregate_physical,
                             build_dataset, load_corpus, load_physical_results, save_corpus, split_dataset,
                             verify_manifest)
from errors import InvalidConfigError, InvalidInputError
from image_io import save_mask

SPEC = TransformSpec.identity(0.25)
CANVAS = CanvasPolicy(side=96)


def make_patches(n):
    return [Patch.gray(12, {'patch_id': f"p{i}"}) for i in range(n)]


def test_every_patch_on_every_image(tmp_path, toy_corpus):
    manifest = build_dataset(make_patches(3), toy_corpus, CANVAS, 7, tmp_path, SPEC)
    assert manifest.counts['entries'] == 12
    assert manifest.counts['patches'] == 3 and manifest.counts['images'] == 4
    assert [e['image_id'] for e in manifest.entries[:4]] == [f"p0__{image.id}" for image, _ in toy_corpus]
    assert all(e['mask_area'] == 144 for e in manifest.entries)
    assert manifest.counts['train'] == 7 and manifest.counts['test'] == 5
    for entry in manifest.entries:
        assert (tmp_path / entry['image_file']).exists()
        assert (tmp_path / entry['mask_file']).exists()
    assert (tmp_path / 'manifest.json').exists()
    assert (tmp_path / 'patches' / 'p0.png').exists()


def test_build_is_deterministic_across_worker_counts(tmp_path, small_corpus):
    spec = TransformSpec(rotation_deg=(-20, 20), scale_ratio=(0.1, 0.3), seed=1)
    serial = build_dataset(make_patches(2), small_corpus, CANVAS, 3, tmp_path / 'a', spec, workers=1)
    parallel = build_dataset(make_patches(2), small_corpus, CANVAS, 3, tmp_path / 'b', spec, workers=3)
    assert serial.entries == parallel.entries


def test_manifest_verifies_and_detects_tampering(tmp_path, small_corpus):
    patches = make_patches(2)
    manifest = build_dataset(patches, small_corpus, CANVAS, 5, tmp_path, SPEC)
    by_id = {p.patch_id: p for p in patches}
    assert verify_manifest(manifest, by_id, small_corpus) == []

    entry = manifest.entries[0]
    save_mask(BinaryMask(np.zeros((96, 96), dtype=bool)), tmp_path / entry['mask_file'])
    reloaded = DatasetManifest.load(tmp_path)
    assert reloaded.counts == manifest.counts
    assert verify_manifest(reloaded, by_id, small_corpus) == [entry['image_id']]


def test_images_without_persons_are_skipped(tmp_path, small_corpus):
    empty = (ImageBuffer(np.full((96, 96, 3), 0.5), 'empty'), GroundTruthSet('empty', []))
    manifest = build_dataset(make_patches(2), list(small_corpus) + [empty], CANVAS, 0, tmp_path, SPEC)
    assert manifest.counts['entries'] == 4
    assert manifest.skipped == [{'patch_id': 'p0', 'source_image': 'empty'},
                                {'patch_id': 'p1', 'source_image': 'empty'}]


def test_bad_inputs(tmp_path, small_corpus):
    with pytest.raises(InvalidInputError):
        build_dataset([], small_corpus, CANVAS, 0, tmp_path)
    with pytest.raises(InvalidInputError):
        build_dataset([Patch.gray(4, {'patch_id': 'x'}), Patch.gray(4, {'patch_id': 'x'})], small_corpus,
                      CANVAS, 0, tmp_path)


def fake_manifest(groups):
    entries = [{'image_id': f"{patch_id}__i{k}", 'patch_id': patch_id, 'source_image': f"i{k}", 'split': None}
               for patch_id, size in groups for k in range(size)]
    return DatasetManifest(entries)


def test_split_ten_entries():
    split = split_dataset(fake_manifest([('p', 10)]), 0.6, seed=1)
    assert split.counts['train'] == 6 and split.counts['test'] == 4
    again = split_dataset(fake_manifest([('p', 10)]), 0.6, seed=1)
    assert [e['split'] for e in split.entries] == [e['split'] for e in again.entries]


def test_stratified_quotas_arithmetic():
    sizes = [1000] * 94
    quotas = _stratified_quotas(sizes, 0.6)
    assert sum(sizes) == 94000
    assert sum(quotas) == 56400
    assert sum(sizes) - sum(quotas) == 37600
    assert _stratified_quotas([4, 4, 4], 0.6) == [3, 2, 2]


def test_stratified_split_keeps_both_sides_per_patch():
    split = split_dataset(fake_manifest([('a', 3), ('b', 7), ('c', 2)]), 0.6, seed=0)
    for patch_id in ('a', 'b', 'c'):
        labels = {e['split'] for e in split.entries if e['patch_id'] == patch_id}
        assert labels == {'train', 'test'}


def test_split_falls_back_to_global_for_tiny_groups():
    split = split_dataset(fake_manifest([('a', 1), ('b', 1), ('c', 1)]), 0.6)
    assert split.counts['train'] == 2
    with pytest.raises(InvalidConfigError):
        split_dataset(fake_manifest([('a', 4)]), 1.0)


def test_canvas_pad_letterboxes():
    image = ImageBuffer(np.full((50, 100, 3), 0.2), 'wide')
    gt = GroundTruthSet('wide', [BoundingBox(0, 0, 100, 50)])
    out, boxes, record = CanvasPolicy(side=64, mode='pad').apply(image, gt)
    assert out.pixels.shape == (64, 64, 3)
    assert record == {'scale_x': 0.64, 'scale_y': 0.64, 'offset_x': 0, 'offset_y': 16}
    box = boxes.boxes[0]
    assert (box.x_min, box.y_min, box.x_max, box.y_max) == pytest.approx((0.0, 16.0, 64.0, 48.0))
    assert out.pixels[0, 0, 0] == 0.5
    np.testing.assert_allclose(out.pixels[20:40, 10:50], 0.2)


def test_canvas_resize_stretches():
    image = ImageBuffer(np.full((50, 100, 3), 0.2), 'wide')
    gt = GroundTruthSet('wide', [BoundingBox(0, 0, 100, 50)])
    out, boxes, record = CanvasPolicy(side=64, mode='resize').apply(image, gt)
    assert out.pixels.shape == (64, 64, 3)
    assert record['scale_x'] == 0.64 and record['scale_y'] == 1.28
    box = boxes.boxes[0]
    assert (box.x_max, box.y_max) == pytest.approx((64.0, 64.0))
    with pytest.raises(InvalidConfigError):
        CanvasPolicy(mode='crop')


def test_small_image_is_not_upscaled_in_pad_mode(toy_corpus):
    image, gt = toy_corpus[0]
    out, boxes, record = CanvasPolicy(side=128).apply(image, gt)
    assert record['scale_x'] == 1.0 and record['offset_x'] == 16
    np.testing.assert_array_equal(out.pixels[16:112, 16:112], image.pixels)
    assert boxes.boxes[0].x_min == gt.boxes[0].x_min + 16


def test_corpus_roundtrip_keeps_annotations(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    loaded = load_corpus(tmp_path)
    assert [image.id for image, _ in loaded] == [image.id for image, _ in small_corpus]
    assert [gt.to_dict() for _, gt in loaded] == [gt.to_dict() for _, gt in small_corpus]
    assert np.abs(loaded[0][0].pixels - small_corpus[0][0].pixels).max() <= 0.5 / 255 + 1e-12


def physical_rows():
    person = [{'box': [0, 0, 10, 20], 'class_id': 0}]
    seen = [{'box': [0, 0, 10, 20], 'class_id': 0, 'score': 0.9}]
    return [
        {'frame_id': '1', 'distance_m': 3, 'angle_deg': 0, 'light_level': 3, 'defense_name': 'lgs',
         'detector_name': 'toy', 'detections': json.dumps(seen), 'ground_truth': json.dumps(person)},
        {'frame_id': '2', 'distance_m': 3, 'angle_deg': 45, 'light_level': 3, 'defense_name': 'lgs',
         'detector_name': 'toy', 'detections': json.dumps([]), 'ground_truth': json.dumps(person)},
        {'frame_id': '3', 'distance_m': 6, 'angle_deg': -60, 'light_level': 1, 'defense_name': 'lgs',
         'detector_name': 'toy', 'detections': json.dumps([]), 'ground_truth': json.dumps(person)},
    ]


def test_physical_aggregation(tmp_path):
    path = tmp_path / 'physical.csv'
    pd.DataFrame(physical_rows()).to_csv(path, index=False)
    frames = load_physical_results(path)
    assert [f.angle_bin for f in frames] == ['[-30,30)', '[30,90)', '[-90,-30)']

    by_distance = aggregate_physical(frames, 'distance')
    assert by_distance['distance'].tolist() == [3, 6]
    assert by_distance['asr'].tolist() == [0.5, 1.0]
    assert by_distance['detection_rate'].tolist() == [0.5, 0.0]
    assert aggregate_physical(frames, 'light')['frames'].tolist() == [1, 2]
    with pytest.raises(InvalidConfigError):
        aggregate_physical(frames, 'weather')


def test_physical_validation(tmp_path):
    rows = physical_rows()
    rows[0]['distance_m'] = 4
    path = tmp_path / 'bad.csv'
    pd.DataFrame(rows).to_csv(path, index=False)
    with pytest.raises(InvalidInputError):
        load_physical_results(path)
    with pytest.raises(InvalidInputError):
        PhysicalFrame('x', 3, 90.0, 3, 'd', 't', None, None)
