"""
Адаптивные атаки: оптимизация патча сквозь защиту

Потеря: L_attack(f(purify(localize(A(x, δ, t))))) + λ·TV(δ) + μ·R(δ).
Недифференцируемые стадии пропускают градиент по правилу straight-through.
"""
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

import config
from applier import Patch, TransformSpec
from attack_engine import AttackConfig, AttackSample, OptimizationTrace, attack_objective, attacked_corpus, \
    default_transform_spec, initial_patch, optimize_patch, prepare_batch, run_descent, tv_loss
from core import GroundTruthSet, ImageBuffer, derive_seed
from defense_zoo import Defense, EntropyConfig, IdentityDefense, window_entropy
from detector_gateway import Detector
from errors import InvalidConfigError, UndefinedMetricError
from logger_config import log_info
from metrics import EvalRecord, asr

REGULARIZERS = ('tv', 'entropy', 'none')
GRADIENT_MODES = ('exact', 'straight-through')


@dataclass
class AdaptiveConfig:
    base: AttackConfig = field(default_factory=AttackConfig)
    bypass_weight: float = 1.0
    regularizer: str = 'tv'
    gradient_mode: str = 'exact'
    defense_draws: int = 1

    def validate(self):
        self.base.validate()
        if self.bypass_weight < 0:
            raise InvalidConfigError("bypass_weight (mu) не может быть отрицательным")
        if self.regularizer not in REGULARIZERS:
            raise InvalidConfigError(f"Неизвестный регуляризатор: {self.regularizer}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise InvalidConfigError(f"Неизвестный режим градиента: {self.gradient_mode}")
        if self.defense_draws < 1:
            raise InvalidConfigError("defense_draws должен быть >= 1")
        return self

    @classmethod
    def from_settings(cls, attack_overrides: Optional[Dict[str, Any]] = None,
                      adaptive_overrides: Optional[Dict[str, Any]] = None) -> "AdaptiveConfig":
        base = AttackConfig.from_settings(attack_overrides)
        return cls(base=base, **config.merged('adaptive', adaptive_overrides)).validate()

    def to_dict(self) -> Dict[str, Any]:
        row = asdict(self)
        row['base'] = self.base.to_dict()
        return row


class AdaptiveRegularizer(ABC):
    """Гладкий суррогат критерия защиты R(δ)"""
    name = 'regularizer'

    @abstractmethod
    def tensor(self, pixels: torch.Tensor, shape_mask: Optional[np.ndarray] = None) -> torch.Tensor:
        pass

    def evaluate(self, p: Patch) -> float:
        with torch.no_grad():
            return float(self.tensor(p.tensor(), p.shape_mask))

    def gradient(self, p: Patch) -> np.ndarray:
        pixels = p.tensor().requires_grad_(True)
        value = self.tensor(pixels, p.shape_mask)
        if not value.requires_grad:
            return np.zeros_like(p.pixels)
        grad, = torch.autograd.grad(value, pixels)
        return grad.numpy()


class SmoothTvRegularizer(AdaptiveRegularizer):
    """Гладкая TV: Σ (sqrt(d² + ε) - sqrt(ε)), равна 0 на постоянном патче"""
    name = 'tv'

    def __init__(self, eps: float = 1e-6):
        self.eps = eps

    def tensor(self, pixels, shape_mask=None):
        h, w = pixels.shape[0], pixels.shape[1]
        mask = torch.ones((h, w), dtype=torch.bool) if shape_mask is None else torch.from_numpy(shape_mask)
        dh = pixels[:, 1:] - pixels[:, :-1]
        dv = pixels[1:, :] - pixels[:-1, :]
        h_pairs = (mask[:, 1:] & mask[:, :-1]).unsqueeze(-1).to(pixels.dtype)
        v_pairs = (mask[1:, :] & mask[:-1, :]).unsqueeze(-1).to(pixels.dtype)
        root_eps = float(np.sqrt(self.eps))
        return ((torch.sqrt(dh * dh + self.eps) - root_eps) * h_pairs).sum() \
            + ((torch.sqrt(dv * dv + self.eps) - root_eps) * v_pairs).sum()


class SoftEntropyRegularizer(AdaptiveRegularizer):
    """Средняя по окнам энтропия мягкой гистограммы (ядро шириной 1/bins)"""
    name = 'entropy'

    def __init__(self, cfg: Optional[EntropyConfig] = None):
        self.cfg = cfg or EntropyConfig.from_settings()

    def tensor(self, pixels, shape_mask=None):
        window = max(2, min(self.cfg.window, pixels.shape[0], pixels.shape[1]))
        entropy = window_entropy(pixels, window, self.cfg.bins, soft=True)
        if shape_mask is None:
            return entropy.mean()
        return entropy[torch.from_numpy(shape_mask)].mean()


class NullRegularizer(AdaptiveRegularizer):
    name = 'none'

    def tensor(self, pixels, shape_mask=None):
        return pixels.sum() * 0.0


def build_regularizer(name: str, settings: Optional[Dict[str, Any]] = None) -> AdaptiveRegularizer:
    if name == 'tv':
        return SmoothTvRegularizer()
    if name == 'entropy':
        return SoftEntropyRegularizer(EntropyConfig.from_settings(settings))
    if name == 'none':
        return NullRegularizer()
    raise InvalidConfigError(f"Неизвестный регуляризатор: {name}")


class BinarizeSTE(torch.autograd.Function):
    """Прямой проход - жесткий порог, обратный - тождество"""

    @staticmethod
    def forward(ctx, soft, threshold):
        return (soft > threshold).to(soft.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


class MaskingSTE(torch.autograd.Function):
    """Прямой проход - результат стадии маскирования, обратный - градиент идет во вход без изменений"""

    @staticmethod
    def forward(ctx, x, staged):
        return staged.detach().clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through_gradient(stage: str) -> Callable[..., torch.Tensor]:
    """
    Правило straight-through для стадии защиты

    'binarization': f(soft, threshold) -> жесткая маска с тождественным градиентом
    'masking': f(x, staged) -> staged с тождественным градиентом по x
    """
    if stage == 'binarization':
        return BinarizeSTE.apply
    if stage == 'masking':
        return MaskingSTE.apply
    raise InvalidConfigError(f"Неизвестная стадия: {stage}")


def defense_view(defense: Defense, gradient_mode: str = 'exact') -> Optional[Callable[[torch.Tensor], torch.Tensor]]:
    """
    Функция "изображение -> очищенное изображение" для цикла атаки

    В режиме straight-through порог маски пропускает градиент оценки локализатора
    (BinarizeSTE); защиты без гладкой оценки пропускают градиент через всю стадию
    маскирования (MaskingSTE). Прямой проход совпадает с defend_tensor.
    """
    if isinstance(defense, IdentityDefense):
        return None
    if not defense.differentiable:
        raise InvalidConfigError(f"Защита '{defense.name}' не допускает адаптивную атаку")
    binarize = straight_through_gradient('binarization')
    masking = straight_through_gradient('masking')

    def view(image: torch.Tensor) -> torch.Tensor:
        if gradient_mode != 'straight-through':
            return defense.defend_tensor(image)[0]
        scored = defense.localization_score(image)
        mask = defense.localize_tensor(image)
        purified = defense.purify_tensor(image, mask)
        if scored is None:
            return masking(image, purified)
        score, threshold = scored
        # Постобработка только убирает пиксели: keep обнуляет отброшенные компоненты
        keep = torch.from_numpy(np.asarray(mask, dtype=bool)).to(image.dtype)
        mask_t = (binarize(score, threshold) * keep).unsqueeze(-1)
        return image + mask_t * (purified - image)

    return view


def adaptive_loss(delta: torch.Tensor, shape_mask: np.ndarray, batch: Sequence[AttackSample],
                  defense: Defense, detector: Detector, cfg: AdaptiveConfig,
                  regularizer: Optional[AdaptiveRegularizer] = None
                  ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, bool, torch.Tensor]:
    """
    Потеря адаптивной атаки на пакете

    При тождественной защите и μ = 0 совпадает с attack_objective побитово.

    Returns:
        (полная потеря, потеря атаки, TV, флаг пустоты, значение R)
    """
    view = defense_view(defense, cfg.gradient_mode)
    draws = cfg.defense_draws if defense.stochastic else 1
    results = [attack_objective(delta, shape_mask, batch, detector, cfg.base, view) for _ in range(draws)]
    if draws == 1:
        total, attack, tv, empty = results[0]
    else:
        total = torch.stack([r[0] for r in results]).mean()
        attack = torch.stack([r[1] for r in results]).mean()
        tv = results[0][2]
        empty = all(r[3] for r in results)

    regularizer = regularizer or build_regularizer(cfg.regularizer)
    reg = regularizer.tensor(delta, shape_mask)
    if cfg.bypass_weight != 0:
        total = total + cfg.bypass_weight * reg
    return total, attack, tv, empty, reg


def post_defense_records(corpus: Sequence[Tuple[ImageBuffer, GroundTruthSet]], detector: Detector,
                         defense: Defense, patch: Patch, spec: TransformSpec, goal: str = 'hiding',
                         seed: int = 0, attack_name: str = 'patch') -> List[EvalRecord]:
    """Накладывает патч, применяет защиту и детектор; стохастическая защита пересеивается seed"""
    defense.reseed(derive_seed(seed, f"defense:{defense.name}"))
    records = []
    for patched, gt, mask in attacked_corpus(corpus, patch, spec, goal, seed=seed):
        defended, pred_mask = defense.defend(patched)
        records.append(EvalRecord(patched.id, attack_name, defense.name, detector.name,
                                  detector.detect(defended), gt, pred_mask, mask))
    return records


def _safe_asr(records: Sequence[EvalRecord]) -> Optional[float]:
    try:
        return asr(records)
    except UndefinedMetricError:
        return None


def run_adaptive_attack(corpus: Sequence[Tuple[ImageBuffer, GroundTruthSet]], detector: Detector,
                        defense: Defense, cfg: AdaptiveConfig, init: Optional[Patch] = None,
                        transform_spec: Optional[TransformSpec] = None,
                        baseline_patch: Optional[Patch] = None,
                        log_every: int = 50) -> Tuple[Patch, OptimizationTrace, Dict[str, Any]]:
    """
    Адаптивная атака и отчет об обходе защиты

    Отчет сравнивает ASR после защиты для адаптивного патча и для базового
    (неадаптивного) патча; базовый патч оптимизируется, если не передан.
    """
    cfg.validate()
    base = cfg.base
    if not detector.supports_gradients:
        raise InvalidConfigError(f"Детектор '{detector.name}' не поддерживает white-box атаку")
    if init is None:
        init = initial_patch(base, detector.name)
    spec = transform_spec or default_transform_spec(base)
    rng = np.random.default_rng(derive_seed(base.seed, 'eot'))
    defense.reseed(derive_seed(base.seed, 'adaptive-defense'))
    regularizer = build_regularizer(cfg.regularizer)

    def objective(delta, step):
        batch = prepare_batch(corpus, base, spec, rng)
        return adaptive_loss(delta, init.shape_mask, batch, defense, detector, cfg, regularizer)

    log_info('attack', f"Адаптивная атака против {defense.name}: mu={cfg.bypass_weight}, "
                       f"R={cfg.regularizer}, режим={cfg.gradient_mode}")
    pixels, trace = run_descent(objective, init, base, 'attack', log_every)

    meta = dict(init.meta)
    meta.update({'attack_name': f"adaptive-{defense.name}", 'victim_detector': detector.name,
                 'goal': base.goal, 'defense': defense.name, 'seed': base.seed})
    patch = Patch(pixels.numpy(), init.shape_mask.copy(), meta)

    if baseline_patch is None:
        baseline_patch, _ = optimize_patch(corpus, detector, base, transform_spec=spec, log_every=log_every)

    adaptive_records = post_defense_records(corpus, detector, defense, patch, spec, base.goal, base.seed)
    baseline_records = post_defense_records(corpus, detector, defense, baseline_patch, spec, base.goal, base.seed)
    adaptive_asr = _safe_asr(adaptive_records)
    baseline_asr = _safe_asr(baseline_records)
    report = {
        'defense': defense.name,
        'detector': detector.name,
        'bypass_weight': cfg.bypass_weight,
        'regularizer': cfg.regularizer,
        'gradient_mode': cfg.gradient_mode,
        'adaptive_asr': adaptive_asr,
        'baseline_asr': baseline_asr,
        'asr_delta': None if adaptive_asr is None or baseline_asr is None else adaptive_asr - baseline_asr,
        'adaptive_tv': tv_loss(patch),
        'baseline_tv': tv_loss(baseline_patch),
    }
    log_info('attack', f"Обход {defense.name}: ASR {baseline_asr} -> {adaptive_asr}")
    return patch, trace, report
