import numpy as np
import pytest
import torch

from applier import Patch, TransformSpec
from attack_engine import (AttackConfig, appearing_loss, attack_objective, attacked_corpus, hiding_loss,
                           optimize_patch, prepare_batch, tv_loss)
from core import BoundingBox, DetectionSet, GroundTruthSet, ImageBuffer
from detector_gateway import CandidateField, Detector
from errors import InvalidConfigError, NonFiniteError
from metrics import EvalRecord, asr


def field(scores, boxes):
    return CandidateField(torch.tensor(scores, dtype=torch.float64), np.array(boxes, dtype=np.float64),
                          np.zeros(len(scores), dtype=np.int64))


GT = GroundTruthSet('g', [BoundingBox(0, 0, 10, 10)])


class FlatDetector(Detector):
    """Константные уверенности одного окна, не зависящие от пикселей"""
    name = 'flat'

    def __init__(self, value=0.7):
        self.value = value

    def detect(self, x):
        return DetectionSet(x.id)

    def confidence_field(self, x):
        scores = torch.full((1,), self.value, dtype=x.dtype) + 0.0 * x.sum()
        return CandidateField(scores, np.array([[0.0, 0.0, 24.0, 24.0]]), np.zeros(1, dtype=np.int64))


class BrokenDetector(FlatDetector):
    name = 'broken'

    def confidence_field(self, x):
        field_ = super().confidence_field(x)
        return CandidateField(field_.scores * float('nan'), field_.boxes, field_.class_ids)


class BlindDetector(FlatDetector):
    supports_gradients = False


def flat_corpus():
    image = ImageBuffer(np.full((24, 24, 3), 0.5), 'f')
    return [(image, GroundTruthSet('f', [BoundingBox(0, 0, 24, 24)]))]


def test_tv_examples():
    assert tv_loss(np.full((4, 4, 3), 0.3)) == 0.0
    assert tv_loss(np.array([[0.0, 1.0], [0.0, 1.0]])) == 2.0
    rng = np.random.default_rng(0)
    pixels = rng.random((6, 6, 3))
    assert tv_loss(0.5 * pixels) == pytest.approx(0.5 * tv_loss(pixels))
    assert tv_loss(pixels, 'isotropic') <= tv_loss(pixels) + 1e-12


def test_tv_respects_shape_mask():
    pixels = np.zeros((2, 2, 1))
    pixels[:, 1] = 1.0
    shape = np.array([[True, False], [True, False]])
    patch = Patch(np.repeat(pixels, 3, axis=2), shape)
    assert tv_loss(patch) == 0.0


def test_hiding_loss_modes():
    dets = field([0.9, 0.2], [[0, 0, 10, 10], [1, 1, 11, 11]])
    loss, empty = hiding_loss(dets, GT, 'max-objectness')
    assert float(loss) == pytest.approx(0.9) and not empty
    loss, _ = hiding_loss(dets, GT, 'mean-objectness')
    assert float(loss) == pytest.approx(0.55)


def test_hiding_loss_without_candidates():
    dets = field([0.9], [[50, 50, 60, 60]])
    loss, empty = hiding_loss(dets, GT)
    assert float(loss) == 0.0 and empty
    loss, empty = hiding_loss(field([0.9], [[0, 0, 10, 10]]), GroundTruthSet('g', []))
    assert empty


def test_appearing_loss_bounds():
    region = BoundingBox(0, 0, 10, 10)
    assert float(appearing_loss(field([1.0], [[0, 0, 10, 10]]), 0, region)[0]) == -1.0
    assert float(appearing_loss(field([0.0], [[0, 0, 10, 10]]), 0, region)[0]) == 0.0


def test_config_validation_and_schedule():
    with pytest.raises(InvalidConfigError):
        AttackConfig(goal='vanish').validate()
    with pytest.raises(InvalidConfigError):
        AttackConfig.from_settings({'unknown_key': 1})
    cfg = AttackConfig(steps=10, learning_rate=0.2, lr_schedule='cosine')
    assert cfg.learning_rate_at(0) == pytest.approx(0.2)
    assert cfg.learning_rate_at(5) == pytest.approx(0.1)
    assert cfg.learning_rate_at(10) == pytest.approx(0.0)


def test_zero_gradient_keeps_init():
    cfg = AttackConfig(steps=5, patch_size=8)
    init = Patch(np.random.default_rng(1).random((8, 8, 3)))
    patch, trace = optimize_patch(flat_corpus(), FlatDetector(), cfg, init=init,
                                  transform_spec=TransformSpec.identity(0.2))
    np.testing.assert_array_equal(patch.pixels, init.pixels)
    assert len(trace) == 5
    assert trace.attack == [pytest.approx(0.7)] * 5


def test_non_finite_loss_reports_step():
    with pytest.raises(NonFiniteError) as info:
        optimize_patch(flat_corpus(), BrokenDetector(), AttackConfig(steps=3, patch_size=4),
                       transform_spec=TransformSpec.identity(0.2))
    assert info.value.step == 0


def test_detector_without_gradients_rejected():
    with pytest.raises(InvalidConfigError):
        optimize_patch(flat_corpus(), BlindDetector(), AttackConfig(steps=1))


def test_runs_are_bit_identical(toy_detector, small_corpus):
    cfg = AttackConfig(steps=15, patch_size=12, init='random', seed=4)
    spec = TransformSpec.identity(0.25)
    first, trace_a = optimize_patch(small_corpus, toy_detector, cfg, transform_spec=spec)
    second, trace_b = optimize_patch(small_corpus, toy_detector, cfg, transform_spec=spec)
    np.testing.assert_array_equal(first.pixels, second.pixels)
    assert trace_a.total == trace_b.total
    assert first.pixels.min() >= 0.0 and first.pixels.max() <= 1.0


def test_objective_gradient_matches_finite_differences(toy_detector, small_corpus):
    cfg = AttackConfig(loss_mode='mean-objectness', tv_weight=0.01, patch_size=10)
    spec = TransformSpec(rotation_deg=(-10, 10), scale_ratio=(0.2, 0.3), seed=2)
    batch = prepare_batch(small_corpus, cfg, spec, np.random.default_rng(3))
    rng = np.random.default_rng(6)
    patch = torch.from_numpy(0.2 + 0.6 * rng.random((10, 10, 3)))
    shape = np.ones((10, 10), dtype=bool)

    def total(p):
        return attack_objective(p, shape, batch, toy_detector, cfg)[0]

    delta = patch.clone().requires_grad_(True)
    grad, = torch.autograd.grad(total(delta), delta)
    eps = 1e-6
    for _ in range(20):
        i, j, c = (int(v) for v in rng.integers(0, (10, 10, 3)))
        plus, minus = patch.clone(), patch.clone()
        plus[i, j, c] += eps
        minus[i, j, c] -= eps
        with torch.no_grad():
            numeric = float(total(plus) - total(minus)) / (2 * eps)
        analytic = float(grad[i, j, c])
        assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-4)


def test_huge_tv_weight_gives_flat_patch(toy_detector, small_corpus):
    cfg = AttackConfig(steps=200, patch_size=8, tv_weight=1e6, lr_schedule='cosine')
    patch, _ = optimize_patch(small_corpus, toy_detector, cfg, transform_spec=TransformSpec.identity(0.3))
    assert tv_loss(patch) < 1e-3


def test_attacked_corpus_empty_mask_without_persons():
    image = ImageBuffer(np.full((32, 32, 3), 0.5), 'empty')
    corpus = [(image, GroundTruthSet('empty', []))]
    patched, gt, mask = attacked_corpus(corpus, Patch.gray(4), TransformSpec.identity(0.2))[0]
    assert mask.area == 0
    np.testing.assert_array_equal(patched.pixels, image.pixels)


@pytest.mark.slow
def test_hiding_patch_beats_random_placebo(toy_detector, toy_corpus):
    cfg = AttackConfig(steps=500, learning_rate=0.01, init='gray', seed=0)
    spec = TransformSpec.identity(0.2)
    patch, trace = optimize_patch(toy_corpus, toy_detector, cfg, transform_spec=spec)
    assert trace.attack[-1] < 0.1 * trace.attack[0]

    def post_attack_asr(p):
        records = [EvalRecord(img.id, 'a', 'none', toy_detector.name, toy_detector.detect(img), gt)
                   for img, gt, _ in attacked_corpus(toy_corpus, p, spec)]
        return asr(records)

    assert post_attack_asr(patch) >= 0.8
    placebo = Patch.uniform_random(cfg.patch_size, np.random.default_rng(99))
    assert post_attack_asr(placebo) <= 0.2


@pytest.mark.slow
def test_appearing_patch_creates_phantom(toy_detector):
    blank = [(ImageBuffer(np.full((96, 96, 3), 0.5), f"blank_{i}"), GroundTruthSet(f"blank_{i}", []))
             for i in range(2)]
    cfg = AttackConfig(goal='appearing', steps=200, patch_size=24, learning_rate=0.01)
    spec = TransformSpec.identity(0.0625)
    patch, trace = optimize_patch(blank, toy_detector, cfg, transform_spec=spec)
    assert trace.attack[0] > -0.5
    assert trace.attack[-1] < -0.5
    stamped, _, mask = attacked_corpus(blank, patch, spec, goal='appearing')[0]
    assert mask.area == 576
    assert any(b.score > 0.5 for b in toy_detector.detect(stamped).boxes)
