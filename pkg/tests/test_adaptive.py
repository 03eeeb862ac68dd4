import sys

import numpy as np
import pytest
import torch

from adaptive import (AdaptiveConfig, NullRegularizer, SmoothTvRegularizer, SoftEntropyRegularizer,
                      adaptive_loss, build_regularizer, defense_view, post_defense_records, run_adaptive_attack,
                      straight_through_gradient)
from applier import Patch, TransformSpec
from attack_engine import AttackConfig, attack_objective, optimize_patch, prepare_batch, tv_loss
from defense_zoo import (EntropyDefense, EraseDefense, ExternalDefenseAdapter, IdentityDefense, LgsDefense,
                         RandomDropoutDefense)
from errors import InvalidConfigError
from metrics import asr


def test_smooth_tv_regularizer():
    reg = SmoothTvRegularizer()
    assert reg.evaluate(Patch.gray(8)) == 0.0
    noisy = Patch.uniform_random(8, np.random.default_rng(0))
    assert 0.0 < reg.evaluate(noisy) <= tv_loss(noisy)
    assert np.isfinite(reg.gradient(Patch.gray(8))).all()


def test_regularizer_registry():
    assert isinstance(build_regularizer('tv'), SmoothTvRegularizer)
    assert isinstance(build_regularizer('entropy'), SoftEntropyRegularizer)
    assert NullRegularizer().evaluate(Patch.gray(4)) == 0.0
    with pytest.raises(InvalidConfigError):
        build_regularizer('l2')


def test_soft_entropy_prefers_flat_patches():
    reg = SoftEntropyRegularizer()
    noisy = Patch.uniform_random(16, np.random.default_rng(4))
    assert reg.evaluate(Patch.gray(16)) < reg.evaluate(noisy)
    assert np.abs(reg.gradient(noisy)).sum() > 0


def test_binarization_passes_gradient_straight_through():
    binarize = straight_through_gradient('binarization')
    soft = torch.tensor([0.2, 0.6, 0.9], dtype=torch.float64, requires_grad=True)
    hard = binarize(soft, 0.5)
    assert hard.tolist() == [0.0, 1.0, 1.0]
    grad, = torch.autograd.grad((hard * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum(), soft)
    assert grad.tolist() == [1.0, 2.0, 3.0]


def test_masking_stage_passes_gradient_straight_through():
    masking = straight_through_gradient('masking')
    x = torch.tensor([0.3, 0.7], dtype=torch.float64, requires_grad=True)
    staged = torch.zeros(2, dtype=torch.float64)
    out = masking(x, staged)
    assert out.tolist() == [0.0, 0.0]
    grad, = torch.autograd.grad(out.sum(), x)
    assert grad.tolist() == [1.0, 1.0]
    with pytest.raises(InvalidConfigError):
        straight_through_gradient('thresholding')


def test_defense_view_rules():
    assert defense_view(IdentityDefense()) is None
    assert callable(defense_view(LgsDefense(), 'straight-through'))
    with pytest.raises(InvalidConfigError):
        defense_view(ExternalDefenseAdapter('ext', [sys.executable, '-c', 'pass']))


def test_adaptive_config_validation():
    with pytest.raises(InvalidConfigError):
        AdaptiveConfig(bypass_weight=-1.0).validate()
    with pytest.raises(InvalidConfigError):
        AdaptiveConfig(gradient_mode='guess').validate()
    cfg = AdaptiveConfig.from_settings({'steps': 5}, {'regularizer': 'entropy'})
    assert cfg.base.steps == 5 and cfg.to_dict()['base']['steps'] == 5


def test_identity_defense_matches_plain_attack_along_descent(toy_detector, small_corpus):
    base = AttackConfig(patch_size=12, tv_weight=0.05, eot_samples=2, seed=1)
    cfg = AdaptiveConfig(base=base, bypass_weight=0.0)
    spec = TransformSpec(scale_ratio=(0.2, 0.3), rotation_deg=(-15.0, 15.0))
    rng = np.random.default_rng(0)
    shape = np.ones((12, 12), dtype=bool)
    delta = torch.from_numpy(np.random.default_rng(1).random((12, 12, 3)))

    for _ in range(10):
        batch = prepare_batch(small_corpus, base, spec, rng)
        d1 = delta.clone().requires_grad_(True)
        plain = attack_objective(d1, shape, batch, toy_detector, base)[0]
        g1, = torch.autograd.grad(plain, d1)
        d2 = delta.clone().requires_grad_(True)
        adaptive = adaptive_loss(d2, shape, batch, IdentityDefense(), toy_detector, cfg)[0]
        g2, = torch.autograd.grad(adaptive, d2)
        assert float(plain) == float(adaptive)
        assert float((g1 - g2).abs().max()) < 1e-6
        delta = torch.clamp(delta - 0.02 * torch.sign(g1), 0.0, 1.0)


def stamped_noise(seed=0):
    pixels = np.full((48, 48, 3), 0.5)
    pixels[16:32, 16:32] = np.random.default_rng(seed).random((16, 16, 3))
    return torch.from_numpy(pixels)


@pytest.mark.parametrize('defense', [LgsDefense(), EntropyDefense(), EraseDefense(LgsDefense(), 'border-mean')],
                         ids=['lgs', 'entropy', 'lgs-erase'])
def test_straight_through_view_keeps_forward_and_thresholds_score(defense):
    image = stamped_noise()
    exact_view = defense_view(defense, 'exact')
    st_view = defense_view(defense, 'straight-through')
    assert torch.allclose(st_view(image), defense.defend_tensor(image)[0], atol=1e-12)

    weights = torch.from_numpy(np.random.default_rng(2).random(image.shape))
    x1 = image.clone().requires_grad_(True)
    g_exact, = torch.autograd.grad((exact_view(x1) * weights).sum(), x1)
    x2 = image.clone().requires_grad_(True)
    g_st, = torch.autograd.grad((st_view(x2) * weights).sum(), x2)
    assert torch.isfinite(g_st).all()
    # Порог пропускает градиент оценки локализатора: к точному добавляется вклад маски
    assert float((g_st - g_exact).abs().max()) > 1e-6


def test_straight_through_falls_back_to_masking_without_score():
    dropout = RandomDropoutDefense(rate=0.5, seed=3)
    assert dropout.localization_score(stamped_noise()) is None
    x = stamped_noise().requires_grad_(True)
    out = defense_view(dropout, 'straight-through')(x)
    grad, = torch.autograd.grad(out.sum(), x)
    assert torch.equal(grad, torch.ones_like(grad))


def test_stochastic_defense_spreads_asr_over_seeds(toy_detector, small_corpus):
    patch = Patch.gray(16)
    spec = TransformSpec.identity(0.4)
    lgs_rates, dropout_rates, dropout_areas = [], [], []
    for seed in range(10):
        records = post_defense_records(small_corpus, toy_detector, LgsDefense(), patch, spec, seed=seed)
        lgs_rates.append(asr(records))
        dropout = RandomDropoutDefense(rate=0.3, block=4, fill='mean', seed=seed)
        records = post_defense_records(small_corpus, toy_detector, dropout, patch, spec, seed=seed)
        dropout_rates.append(asr(records))
        dropout_areas.append(sum(r.pred_mask.area for r in records))
    assert np.var(lgs_rates) == 0.0
    assert np.var(dropout_areas) > 0.0
    assert np.var(dropout_rates) > 0.0


@pytest.mark.slow
def test_adaptive_patch_beats_same_budget_baseline_against_lgs(toy_detector, toy_corpus):
    spec = TransformSpec.identity(0.25)
    base = AttackConfig(init='random', patch_size=12, step_rule='gradient', learning_rate=0.2, steps=100, seed=0)
    cfg = AdaptiveConfig(base=base, bypass_weight=0.01, regularizer='tv')
    patch, trace, report = run_adaptive_attack(toy_corpus, toy_detector, LgsDefense(), cfg, transform_spec=spec)
    assert len(trace.regularizer) == 100
    assert patch.meta['defense'] == 'lgs'
    assert report['adaptive_asr'] > report['baseline_asr']
    assert report['asr_delta'] > 0.5

    # Тот же бюджет и та же конфигурация дают тот же базовый патч
    baseline, baseline_trace = optimize_patch(toy_corpus, toy_detector, base, transform_spec=spec)
    assert report['baseline_tv'] == pytest.approx(tv_loss(baseline))
    assert trace.attack[-1] < 0.5
    assert baseline_trace.attack[-1] < 0.5
    assert report['adaptive_tv'] < 0.5 * report['baseline_tv']
