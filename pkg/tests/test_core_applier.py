import numpy as np
import pytest
import torch

from applier import (ConcreteTransform, Patch, Placement, TransformSpec, apply_patch, apply_patches,
                     default_placements, sample_transform, stamp_tensor)
from core import (BinaryMask, BoundingBox, GroundTruthSet, ImageBuffer, PixelConfusion, box_iou,
                  derive_seed, pixel_confusion, rasterize_box)
from errors import InvalidConfigError, InvalidInputError, PlacementError


def test_box_iou_examples():
    a = BoundingBox(0, 0, 10, 10)
    assert box_iou(a, BoundingBox(0, 0, 10, 10)) == 1.0
    assert box_iou(a, BoundingBox(10, 10, 20, 20)) == 0.0
    assert box_iou(a, BoundingBox(5, 0, 15, 10)) == pytest.approx(1 / 3)


def test_degenerate_box_rejected():
    with pytest.raises(InvalidInputError):
        BoundingBox(5, 5, 5, 10)
    with pytest.raises(InvalidInputError):
        BoundingBox(0, 0, 1, 1, score=1.5)


def test_pixel_confusion_examples():
    full = np.zeros((20, 20), dtype=bool)
    full[:10, :10] = True
    assert pixel_confusion(BinaryMask(full), BinaryMask(full)) == PixelConfusion(100, 0, 0)
    assert pixel_confusion(BinaryMask(np.zeros_like(full)), BinaryMask(full)) == PixelConfusion(0, 0, 100)

    pred = np.zeros((8, 8), dtype=bool)
    pred[0:4, 0:4] = True
    gt = np.zeros((8, 8), dtype=bool)
    gt[0:4, 2:6] = True
    assert pixel_confusion(BinaryMask(pred), BinaryMask(gt)) == PixelConfusion(8, 8, 8)


def test_pixel_confusion_shape_mismatch():
    with pytest.raises(InvalidInputError):
        pixel_confusion(BinaryMask(np.zeros((2, 2))), BinaryMask(np.zeros((3, 3))))


def test_image_buffer_validates_range():
    with pytest.raises(InvalidInputError):
        ImageBuffer(np.full((2, 2, 3), 1.5))
    with pytest.raises(InvalidInputError):
        ImageBuffer(np.zeros((2, 2)))
    image = ImageBuffer.from_uint8(np.full((2, 2, 3), 255, dtype=np.uint8))
    assert image.pixels.max() == 1.0


def test_rasterize_half_open_rule():
    bits = rasterize_box(BoundingBox(1, 1, 3, 4), 6, 6)
    assert bits.sum() == 6
    assert bits[1:4, 1:3].all()


def test_derive_seed_is_stable_and_named():
    assert derive_seed(0, 'attack') == derive_seed(0, 'attack')
    assert derive_seed(0, 'attack') != derive_seed(0, 'split')
    assert derive_seed(0, 'attack') != derive_seed(1, 'attack')


def test_sample_transform_determinism_and_ranges():
    spec = TransformSpec(rotation_deg=(-20, 20), scale_ratio=(0.1, 0.4), jitter=(-0.1, 0.1),
                         brightness=(0.8, 1.2), seed=3)
    first = [sample_transform(spec, np.random.default_rng(9)) for _ in range(3)]
    second = [sample_transform(spec, np.random.default_rng(9)) for _ in range(3)]
    assert first == second

    rng = np.random.default_rng(1)
    for _ in range(1000):
        t = sample_transform(spec, rng)
        assert -20 <= t.rotation_deg <= 20
        assert 0.1 <= t.scale_ratio <= 0.4
        assert -0.1 <= t.jitter_x <= 0.1 and -0.1 <= t.jitter_y <= 0.1
        assert 0.8 <= t.brightness <= 1.2


def test_collapsed_ranges_give_exact_tuple():
    spec = TransformSpec(rotation_deg=(0, 0), scale_ratio=(0.3, 0.3))
    t = sample_transform(spec, 5)
    assert t == ConcreteTransform(rotation_deg=0.0, scale_ratio=0.3)


def test_invalid_range_rejected():
    with pytest.raises(InvalidConfigError):
        sample_transform(TransformSpec(scale_ratio=(0.5, 0.1)))


def test_full_image_patch_identity():
    rng = np.random.default_rng(0)
    image = ImageBuffer(rng.random((16, 16, 3)), 'x')
    patch = Patch(rng.random((16, 16, 3)))
    out, mask = apply_patch(image, patch, ConcreteTransform(scale_ratio=1.0), Placement(full_image=True))
    assert mask.bits.all()
    np.testing.assert_allclose(out.pixels, patch.pixels, atol=1e-12)


def test_centered_square_mask_area():
    image = ImageBuffer(np.full((416, 416, 3), 0.5), 'big')
    patch = Patch(np.full((50, 50, 3), 0.2))
    t = ConcreteTransform(scale_ratio=2500 / 416 ** 2)
    out, mask = apply_patch(image, patch, t, Placement(full_image=True))
    assert mask.area == 2500
    np.testing.assert_array_equal(out.pixels[~mask.bits], image.pixels[~mask.bits])


def test_mask_complement_untouched_under_rotation():
    rng = np.random.default_rng(2)
    image = ImageBuffer(rng.random((64, 64, 3)), 'r')
    patch = Patch(rng.random((12, 12, 3)))
    box = BoundingBox(10, 10, 50, 54)
    out, mask = apply_patch(image, patch, ConcreteTransform(rotation_deg=33, scale_ratio=0.2, brightness=1.1),
                            Placement(target_box=box))
    assert mask.area > 0
    np.testing.assert_array_equal(out.pixels[~mask.bits], image.pixels[~mask.bits])


def test_area_monotone_in_scale():
    image = ImageBuffer(np.full((80, 80, 3), 0.5))
    patch = Patch(np.full((10, 10, 3), 0.9))
    box = BoundingBox(10, 10, 70, 70)
    areas = [apply_patch(image, patch, ConcreteTransform(scale_ratio=s), Placement(target_box=box))[1].area
             for s in (0.05, 0.1, 0.2, 0.4)]
    assert areas == sorted(areas)


def test_shape_mask_limits_stamp():
    shape = np.zeros((8, 8), dtype=bool)
    shape[2:6, 2:6] = True
    patch = Patch(np.full((8, 8, 3), 0.9), shape)
    image = ImageBuffer(np.full((8, 8, 3), 0.1))
    out, mask = apply_patch(image, patch, ConcreteTransform(scale_ratio=1.0), Placement(full_image=True))
    assert mask.area == 16
    np.testing.assert_array_equal(mask.bits, shape)


def test_placement_errors():
    image = ImageBuffer(np.full((8, 8, 3), 0.5))
    patch = Patch(np.full((2, 2, 3), 0.5))
    with pytest.raises(PlacementError):
        apply_patch(image, patch, ConcreteTransform(), Placement())
    with pytest.raises(PlacementError):
        apply_patch(image, patch, ConcreteTransform(), Placement(anchor='fixed-coordinates'))


def test_patch_outside_image_gives_empty_mask():
    image = ImageBuffer(np.full((8, 8, 3), 0.5))
    patch = Patch(np.full((2, 2, 3), 0.9))
    out, mask = apply_patch(image, patch, ConcreteTransform(scale_ratio=0.05),
                            Placement(anchor='fixed-coordinates', center=(100.0, 100.0)))
    assert mask.area == 0
    np.testing.assert_array_equal(out.pixels, image.pixels)


def test_default_placements_multi_patch():
    gt = GroundTruthSet('g', [BoundingBox(0, 0, 20, 60), BoundingBox(40, 0, 60, 60)])
    assert len(default_placements(gt)) == 2
    many = default_placements(gt, patches_per_person=3)
    assert len(many) == 6
    assert [p.center[1] for p in many[:3]] == [10.0, 30.0, 50.0]
    assert len(default_placements(gt, patches_per_person=3, max_patches=2)) == 2


def test_apply_patches_union_mask():
    image = ImageBuffer(np.full((60, 60, 3), 0.5))
    patch = Patch(np.full((4, 4, 3), 0.9))
    gt = GroundTruthSet('g', [BoundingBox(0, 0, 20, 20), BoundingBox(30, 30, 50, 50)])
    placements = default_placements(gt)
    transforms = [ConcreteTransform(scale_ratio=0.16)] * 2
    _, mask = apply_patches(image, patch, transforms, placements)
    single = [apply_patch(image, patch, t, p)[1].area for t, p in zip(transforms, placements)]
    assert mask.area == sum(single)


def test_stamp_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    image = torch.from_numpy(rng.random((40, 40, 3)))
    patch = torch.from_numpy(0.1 + 0.8 * rng.random((10, 10, 3)))
    weights = torch.from_numpy(rng.standard_normal((40, 40, 3)))
    shape = np.ones((10, 10), dtype=bool)
    t = ConcreteTransform(rotation_deg=17, scale_ratio=0.15, jitter_x=0.05)
    place = Placement(target_box=BoundingBox(5, 5, 35, 38))

    def loss(p):
        out, _ = stamp_tensor(image, p, shape, t, place)
        return (out * weights).sum()

    delta = patch.clone().requires_grad_(True)
    grad, = torch.autograd.grad(loss(delta), delta)
    eps = 1e-6
    for _ in range(20):
        i, j, c = int(rng.integers(10)), int(rng.integers(10)), int(rng.integers(3))
        plus, minus = patch.clone(), patch.clone()
        plus[i, j, c] += eps
        minus[i, j, c] -= eps
        numeric = float(loss(plus) - loss(minus)) / (2 * eps)
        analytic = float(grad[i, j, c])
        assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(analytic))
