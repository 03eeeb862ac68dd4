"""
Оптимизация универсального патча: E_t[L(f(A(x, δ, t)), y)] + λ·L_tv(δ)

Цикл первого порядка (знаковый шаг по умолчанию) с проекцией в [0, 1] после
каждого шага и оценкой ожидания по EOT-выборкам преобразований.
"""
import math
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

import config
from applier import ConcreteTransform, Patch, Placement, TransformSpec, apply_patches, \
    default_placements, sample_transform, stamp_tensor
from core import BinaryMask, BoundingBox, GroundTruthSet, ImageBuffer, PERSON_CLASS, derive_seed
from detector_gateway import CandidateField, Detector
from errors import InvalidConfigError, InvalidInputError, NonFiniteError
from logger_config import log_info, log_warning

GOALS = ('hiding', 'appearing')
LOSS_MODES = ('max-objectness', 'mean-objectness', 'target-class')


@dataclass
class AttackConfig:
    """Параметры атаки; значения по умолчанию берутся из config.ATTACK_SETTINGS"""
    goal: str = 'hiding'
    loss_mode: str = 'max-objectness'
    tv_weight: float = 0.0
    tv_variant: str = 'anisotropic'
    steps: int = 300
    learning_rate: float = 0.01
    step_rule: str = 'sign'
    lr_schedule: str = 'constant'
    eot_samples: int = 1
    init: str = 'gray'
    patch_size: int = 32
    overlap_iou: float = 0.3
    target_class: int = PERSON_CLASS
    seed: int = 0

    def validate(self):
        if self.goal not in GOALS:
            raise InvalidConfigError(f"Неизвестная цель атаки: {self.goal}")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidConfigError(f"Неизвестный режим потери: {self.loss_mode}")
        if self.steps < 1:
            raise InvalidConfigError("steps должен быть >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate должен быть > 0")
        if self.tv_weight < 0:
            raise InvalidConfigError("tv_weight не может быть отрицательным")
        if self.eot_samples < 1:
            raise InvalidConfigError("eot_samples должен быть >= 1")
        if self.tv_variant not in ('anisotropic', 'isotropic'):
            raise InvalidConfigError(f"Неизвестный вариант TV: {self.tv_variant}")
        if self.step_rule not in ('sign', 'gradient'):
            raise InvalidConfigError(f"Неизвестное правило шага: {self.step_rule}")
        if self.lr_schedule not in ('constant', 'cosine'):
            raise InvalidConfigError(f"Неизвестное расписание шага: {self.lr_schedule}")
        if self.init not in ('gray', 'random'):
            raise InvalidConfigError(f"Неизвестная инициализация: {self.init}")
        return self

    @classmethod
    def from_settings(cls, overrides: Optional[Dict[str, Any]] = None) -> "AttackConfig":
        return cls(**config.merged('attack', overrides)).validate()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def learning_rate_at(self, step: int) -> float:
        if self.lr_schedule == 'cosine':
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))
        return self.learning_rate


@dataclass
class OptimizationTrace:
    """Потери по шагам (значения до обновления патча на этом шаге)"""
    total: List[float] = field(default_factory=list)
    attack: List[float] = field(default_factory=list)
    tv: List[float] = field(default_factory=list)
    nothing_to_suppress: List[bool] = field(default_factory=list)
    regularizer: List[float] = field(default_factory=list)  # только в адаптивных атаках

    def __len__(self):
        return len(self.total)

    def append(self, total: float, attack: float, tv: float, empty: bool,
               regularizer: Optional[float] = None):
        self.total.append(total)
        self.attack.append(attack)
        self.tv.append(tv)
        self.nothing_to_suppress.append(empty)
        if regularizer is not None:
            self.regularizer.append(regularizer)

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for i, (t, a, v, e) in enumerate(zip(self.total, self.attack, self.tv, self.nothing_to_suppress)):
            row = {'step': i, 'total_loss': t, 'attack_loss': a, 'tv_loss': v, 'nothing_to_suppress': e}
            if i < len(self.regularizer):
                row['regularizer'] = self.regularizer[i]
            rows.append(row)
        return rows


@dataclass
class AttackSample:
    """Одно изображение пакета с выбранными размещениями и преобразованиями"""
    image: torch.Tensor
    gt: GroundTruthSet
    placements: List[Placement]
    transforms: List[ConcreteTransform]


def tv_tensor(pixels: torch.Tensor, shape_mask: Optional[np.ndarray] = None,
              variant: str = 'anisotropic') -> torch.Tensor:
    """Полная вариация тензора h x w x c по парам соседей внутри маски формы"""
    if pixels.dim() == 2:
        pixels = pixels.unsqueeze(-1)
    h, w = pixels.shape[0], pixels.shape[1]
    if shape_mask is None:
        shape_mask = np.ones((h, w), dtype=bool)
    mask = torch.from_numpy(np.asarray(shape_mask, dtype=bool))

    dh = pixels[:, 1:] - pixels[:, :-1]
    dv = pixels[1:, :] - pixels[:-1, :]
    h_pairs = (mask[:, 1:] & mask[:, :-1]).unsqueeze(-1)
    v_pairs = (mask[1:, :] & mask[:-1, :]).unsqueeze(-1)
    dh = torch.where(h_pairs, dh, torch.zeros_like(dh))
    dv = torch.where(v_pairs, dv, torch.zeros_like(dv))

    if variant == 'anisotropic':
        return dh.abs().sum() + dv.abs().sum()
    if variant != 'isotropic':
        raise InvalidConfigError(f"Неизвестный вариант TV: {variant}")

    # Разности на общей сетке (h-1) x (w-1); корень берется только от ненулевых сумм
    squared = dh[:-1, :] ** 2 + dv[:, :-1] ** 2
    positive = squared > 0
    safe = torch.where(positive, squared, torch.ones_like(squared))
    iso = torch.where(positive, torch.sqrt(safe), torch.zeros_like(squared)).sum()
    # Последняя строка и последний столбец имеют только одну из разностей
    return iso + dh[-1, :].abs().sum() + dv[:, -1].abs().sum()


def tv_loss(p: Union[Patch, np.ndarray], variant: str = 'anisotropic') -> float:
    """
    Полная вариация патча

    Для Patch учитываются только пары соседей внутри его маски формы.
    Принимает также массивы h x w и h x w x c.
    """
    if isinstance(p, Patch):
        pixels, mask = p.pixels, p.shape_mask
    else:
        pixels = np.asarray(p, dtype=np.float64)
        if pixels.size == 0:
            raise InvalidInputError("Пустой патч")
        mask = None
    return float(tv_tensor(torch.from_numpy(np.array(pixels, dtype=np.float64)), mask, variant))


def _boxes_iou(boxes: np.ndarray, target: BoundingBox) -> np.ndarray:
    ix = np.clip(np.minimum(boxes[:, 2], target.x_max) - np.maximum(boxes[:, 0], target.x_min), 0, None)
    iy = np.clip(np.minimum(boxes[:, 3], target.y_max) - np.maximum(boxes[:, 1], target.y_min), 0, None)
    inter = ix * iy
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (areas + target.area - inter)


def overlapping_candidates(field_: CandidateField, targets: Sequence[BoundingBox], class_id: int,
                           overlap_iou: float) -> np.ndarray:
    """Индексы кандидатов класса class_id, перекрывающих хотя бы одну цель с IoU >= overlap_iou"""
    if len(field_) == 0 or not targets:
        return np.zeros(0, dtype=np.int64)
    selected = np.zeros(len(field_), dtype=bool)
    for target in targets:
        selected |= _boxes_iou(field_.boxes, target) >= overlap_iou
    selected &= field_.class_ids == class_id
    return np.nonzero(selected)[0]


def hiding_loss(dets: CandidateField, gt: GroundTruthSet, mode: str = 'max-objectness',
                overlap_iou: float = 0.3, target_class: int = PERSON_CLASS) -> Tuple[torch.Tensor, bool]:
    """
    Потеря сокрытия: максимум (или среднее) уверенности кандидатов над людьми из разметки

    Returns:
        (потеря, флаг "нечего подавлять"); при отсутствии кандидатов потеря равна 0
    """
    class_id = target_class if mode == 'target-class' else PERSON_CLASS
    targets = [b for b in gt.boxes if b.class_id == class_id]
    index = overlapping_candidates(dets, targets, class_id, overlap_iou)
    if len(index) == 0:
        return dets.scores.sum() * 0.0, True

    scores = dets.scores[torch.from_numpy(index)]
    if mode == 'mean-objectness':
        return scores.mean(), False
    if mode in ('max-objectness', 'target-class'):
        return scores.max(), False
    raise InvalidConfigError(f"Неизвестный режим потери: {mode}")


def appearing_loss(dets: CandidateField, target_class: int, target_region: BoundingBox,
                   overlap_iou: float = 0.3) -> Tuple[torch.Tensor, bool]:
    """Отрицательная уверенность целевого класса в целевой области (минимум -1)"""
    index = overlapping_candidates(dets, [target_region], target_class, overlap_iou)
    if len(index) == 0:
        return dets.scores.sum() * 0.0, True
    return -dets.scores[torch.from_numpy(index)].max(), False


def mask_bounds(mask: np.ndarray) -> Optional[BoundingBox]:
    """Ограничивающий бокс маски размещения (None для пустой маски)"""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if len(rows) == 0:
        return None
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def attack_placements(gt: GroundTruthSet, cfg: AttackConfig, height: int, width: int,
                      placement_settings: Optional[Dict[str, Any]] = None) -> List[Placement]:
    """Сокрытие: патч на каждом человеке; появление: патч в центре изображения"""
    if cfg.goal == 'appearing':
        return [Placement(anchor='fixed-coordinates', center=(width / 2.0, height / 2.0))]
    settings = config.merged('placement', placement_settings)
    return default_placements(gt, settings['patches_per_person'], settings['max_patches'])


def prepare_batch(corpus: Sequence[Tuple[ImageBuffer, GroundTruthSet]], cfg: AttackConfig,
                  spec: TransformSpec, rng: np.random.Generator,
                  placement_settings: Optional[Dict[str, Any]] = None) -> List[AttackSample]:
    """Выбирает eot_samples наборов преобразований для каждого изображения (фиксированный порядок)"""
    batch = []
    for image, gt in corpus:
        placements = attack_placements(gt, cfg, image.height, image.width, placement_settings)
        if not placements:
            continue
        image_t = torch.from_numpy(image.pixels)
        for _ in range(cfg.eot_samples):
            transforms = [sample_transform(spec, rng) for _ in placements]
            batch.append(AttackSample(image_t, gt, placements, transforms))
    return batch


def sample_loss(delta: torch.Tensor, shape_mask: np.ndarray, sample: AttackSample,
                detector: Detector, cfg: AttackConfig,
                view: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> Tuple[torch.Tensor, bool]:
    """
    Потеря атаки на одном изображении с патчем

    view - преобразование изображения перед детектором (например, защита
    в адаптивной атаке); None означает прямую подачу.
    """
    image = sample.image
    stamped_masks = []
    for place, transform in zip(sample.placements, sample.transforms):
        image, mask = stamp_tensor(image, delta, shape_mask, transform, place)
        stamped_masks.append(mask)
    if view is not None:
        image = view(image)
    candidates = detector.confidence_field(image)

    if cfg.goal == 'hiding':
        return hiding_loss(candidates, sample.gt, cfg.loss_mode, cfg.overlap_iou, cfg.target_class)
    region = mask_bounds(np.logical_or.reduce(stamped_masks))
    if region is None:
        return candidates.scores.sum() * 0.0, True
    return appearing_loss(candidates, cfg.target_class, region, cfg.overlap_iou)


def attack_objective(delta: torch.Tensor, shape_mask: np.ndarray, batch: Sequence[AttackSample],
                     detector: Detector, cfg: AttackConfig,
                     view: Optional[Callable[[torch.Tensor], torch.Tensor]] = None
                     ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, bool]:
    """
    Полная цель шага: среднее потерь атаки по пакету + λ·TV

    Returns:
        (полная потеря, потеря атаки, TV, флаг "нечего подавлять" для всего пакета)
    """
    losses = []
    empty_flags = []
    for sample in batch:
        loss, empty = sample_loss(delta, shape_mask, sample, detector, cfg, view)
        losses.append(loss)
        empty_flags.append(empty)

    # Суммирование в фиксированном порядке пакета
    attack = torch.stack(losses).mean() if losses else delta.sum() * 0.0
    tv = tv_tensor(delta, shape_mask, cfg.tv_variant)
    total = attack + cfg.tv_weight * tv
    return total, attack, tv, all(empty_flags)


def initial_patch(cfg: AttackConfig, detector_name: str = 'unknown') -> Patch:
    meta = {'attack_name': f"{cfg.goal}-{cfg.loss_mode}", 'victim_detector': detector_name, 'goal': cfg.goal}
    if cfg.init == 'random':
        rng = np.random.default_rng(derive_seed(cfg.seed, 'init'))
        return Patch.uniform_random(cfg.patch_size, rng, meta)
    return Patch.gray(cfg.patch_size, meta)


Objective = Callable[[torch.Tensor, int], Tuple[torch.Tensor, torch.Tensor, torch.Tensor, bool, Optional[torch.Tensor]]]


def run_descent(objective: Objective, init: Patch, cfg: AttackConfig, component: str = 'attack',
                log_every: int = 50) -> Tuple[torch.Tensor, OptimizationTrace]:
    """
    Общий цикл спуска: шаг по знаку (или по градиенту), затем проекция в [0, 1]

    objective(delta, step) -> (полная потеря, потеря атаки, TV, флаг пустоты, регуляризатор или None)
    """
    update_mask = torch.from_numpy(init.shape_mask).unsqueeze(-1).to(torch.float64)
    delta = init.tensor()
    trace = OptimizationTrace()

    for step in range(cfg.steps):
        delta = delta.detach().requires_grad_(True)
        total, attack, tv, empty, extra = objective(delta, step)
        if not torch.isfinite(total):
            raise NonFiniteError(f"Нечисловая потеря на шаге {step}", step)

        grad = None
        if total.requires_grad:
            grad, = torch.autograd.grad(total, delta, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(delta)
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f"Нечисловой градиент на шаге {step}", step)

        trace.append(float(total), float(attack), float(tv), empty,
                     None if extra is None else float(extra))
        if empty and step == 0:
            log_warning(component, "Нет кандидатов для подавления: потеря атаки равна 0")

        direction = torch.sign(grad) if cfg.step_rule == 'sign' else grad
        with torch.no_grad():
            delta = torch.clamp(delta - cfg.learning_rate_at(step) * direction * update_mask, 0.0, 1.0)

        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log_info(component, f"Шаг {step}: total={float(total):.6f} attack={float(attack):.6f} "
                                f"tv={float(tv):.6f}")
    return delta.detach(), trace


def default_transform_spec(cfg: AttackConfig) -> TransformSpec:
    return TransformSpec.from_settings(config.TRANSFORM_SETTINGS, derive_seed(cfg.seed, 'transform'))


def optimize_patch(images: Sequence[Tuple[ImageBuffer, GroundTruthSet]], detector: Detector,
                   cfg: AttackConfig, init: Optional[Patch] = None,
                   transform_spec: Optional[TransformSpec] = None,
                   placement_settings: Optional[Dict[str, Any]] = None,
                   log_every: int = 50) -> Tuple[Patch, OptimizationTrace]:
    """
    Оптимизирует универсальный патч по корпусу

    Args:
        images: Корпус (изображение, разметка)
        detector: Детектор с дифференцируемым confidence_field
        cfg: Параметры атаки
        init: Начальный патч (по умолчанию по cfg.init)
        transform_spec: Диапазоны EOT (по умолчанию config.TRANSFORM_SETTINGS)

    Raises:
        NonFiniteError: нечисловая потеря или градиент (с номером шага)
    """
    cfg.validate()
    if not detector.supports_gradients:
        raise InvalidConfigError(f"Детектор '{detector.name}' не поддерживает white-box атаку")
    if init is None:
        init = initial_patch(cfg, detector.name)
    spec = transform_spec or default_transform_spec(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, 'eot'))

    def objective(delta, step):
        batch = prepare_batch(images, cfg, spec, rng, placement_settings)
        total, attack, tv, empty = attack_objective(delta, init.shape_mask, batch, detector, cfg)
        return total, attack, tv, empty, None

    log_info('attack', f"Старт атаки {cfg.goal}/{cfg.loss_mode} на {detector.name}: "
                       f"{len(images)} изображений, {cfg.steps} шагов")
    pixels, trace = run_descent(objective, init, cfg, 'attack', log_every)

    meta = dict(init.meta)
    meta.update({'victim_detector': detector.name, 'goal': cfg.goal, 'steps': cfg.steps,
                 'tv_weight': cfg.tv_weight, 'seed': cfg.seed})
    return Patch(pixels.numpy(), init.shape_mask.copy(), meta), trace


def attacked_corpus(corpus: Sequence[Tuple[ImageBuffer, GroundTruthSet]], patch: Patch,
                    spec: TransformSpec, goal: str = 'hiding',
                    placement_settings: Optional[Dict[str, Any]] = None,
                    seed: int = 0) -> List[Tuple[ImageBuffer, GroundTruthSet, BinaryMask]]:
    """
    Накладывает готовый патч на каждое изображение корпуса

    Преобразование выбирается генератором, выведенным из (seed, id изображения).
    Изображения без размещений возвращаются без изменений с пустой маской.
    """
    placeholder = AttackConfig(goal=goal)
    attacked = []
    for image, gt in corpus:
        placements = attack_placements(gt, placeholder, image.height, image.width, placement_settings)
        if not placements:
            attacked.append((image, gt, BinaryMask.empty_like(image)))
            continue
        rng = np.random.default_rng(derive_seed(seed, f"apply:{image.id}"))
        transforms = [sample_transform(spec, rng) for _ in placements]
        patched, mask = apply_patches(image, patch, transforms, placements)
        attacked.append((patched, gt, mask))
    return attacked
