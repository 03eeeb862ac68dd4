"""
Аппликатор патча A(x, δ, t): выбор преобразования и наложение патча на изображение
с возвратом точной маски размещения
"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from core import BinaryMask, BoundingBox, GroundTruthSet, ImageBuffer
from errors import InvalidConfigError, InvalidInputError, PlacementError

Range = Tuple[float, float]


@dataclass
class Patch:
    """
    Обучаемый патч δ: пиксели h x w x 3, маска формы (непрямоугольные патчи) и метаданные
    """
    pixels: np.ndarray
    shape_mask: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidInputError(f"Патч должен иметь форму h x w x 3, получено {pixels.shape}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidInputError("Пиксели патча вне [0, 1]")
        if self.shape_mask is None:
            shape_mask = np.ones(pixels.shape[:2], dtype=bool)
        else:
            shape_mask = np.asarray(self.shape_mask).astype(bool)
        if shape_mask.shape != pixels.shape[:2]:
            raise InvalidInputError("Маска формы не совпадает с размером патча")
        if not shape_mask.any():
            raise InvalidInputError("Пустая маска формы патча")
        self.pixels = pixels
        self.shape_mask = shape_mask
        self.meta.setdefault('attack_name', 'unnamed')
        self.meta.setdefault('victim_detector', 'unknown')
        self.meta.setdefault('goal', 'hiding')

    @property
    def patch_id(self) -> str:
        return str(self.meta.get('patch_id', self.meta['attack_name']))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.pixels.copy())

    @classmethod
    def gray(cls, side: int, meta: Optional[Dict[str, Any]] = None) -> "Patch":
        return cls(np.full((side, side, 3), 0.5), None, dict(meta or {}))

    @classmethod
    def uniform_random(cls, side: int, rng: np.random.Generator,
                       meta: Optional[Dict[str, Any]] = None) -> "Patch":
        return cls(rng.uniform(0.0, 1.0, size=(side, side, 3)), None, dict(meta or {}))


@dataclass
class TransformSpec:
    """Диапазоны преобразований EOT; выборка детерминирована при заданном сиде"""
    rotation_deg: Range = (0.0, 0.0)
    scale_ratio: Range = (0.2, 0.2)
    jitter: Range = (0.0, 0.0)
    brightness: Range = (1.0, 1.0)
    seed: int = 0

    def validate(self):
        for name in ('rotation_deg', 'scale_ratio', 'jitter', 'brightness'):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidConfigError(f"Пустой диапазон {name}: ({lo}, {hi})")
        lo, hi = self.scale_ratio
        if lo <= 0.0 or hi > 1.0:
            raise InvalidConfigError(f"scale_ratio должен лежать в (0, 1], получено ({lo}, {hi})")
        if self.brightness[0] < 0.0:
            raise InvalidConfigError("Множитель яркости не может быть отрицательным")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any], seed: int = 0) -> "TransformSpec":
        spec = cls(
            rotation_deg=tuple(settings['rotation_deg']),
            scale_ratio=tuple(settings['scale_ratio']),
            jitter=tuple(settings['jitter']),
            brightness=tuple(settings['brightness']),
            seed=seed,
        )
        spec.validate()
        return spec

    @classmethod
    def identity(cls, scale_ratio: float = 0.2, seed: int = 0) -> "TransformSpec":
        return cls(scale_ratio=(scale_ratio, scale_ratio), seed=seed)


@dataclass(frozen=True)
class ConcreteTransform:
    rotation_deg: float = 0.0
    scale_ratio: float = 0.2
    jitter_x: float = 0.0
    jitter_y: float = 0.0
    brightness: float = 1.0

    def to_dict(self) -> Dict[str, float]:
        return {
            'rotation_deg': self.rotation_deg,
            'scale_ratio': self.scale_ratio,
            'jitter_x': self.jitter_x,
            'jitter_y': self.jitter_y,
            'brightness': self.brightness,
        }

    @classmethod
    def from_dict(cls, row: Dict[str, float]) -> "ConcreteTransform":
        return cls(**{k: float(v) for k, v in row.items()})


@dataclass
class Placement:
    """
    Куда ставить патч: центр целевого бокса (или всего изображения) либо фиксированные координаты
    """
    target_box: Optional[BoundingBox] = None
    full_image: bool = False
    anchor: str = 'center-of-box'
    center: Optional[Tuple[float, float]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'target_box': None if self.target_box is None else self.target_box.to_dict(),
            'full_image': self.full_image,
            'anchor': self.anchor,
            'center': None if self.center is None else list(self.center),
        }

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "Placement":
        box = row.get('target_box')
        center = row.get('center')
        return cls(
            target_box=None if box is None else BoundingBox.from_dict(box),
            full_image=bool(row.get('full_image', False)),
            anchor=row.get('anchor', 'center-of-box'),
            center=None if center is None else (float(center[0]), float(center[1])),
        )


def _draw(rng: np.random.Generator, bounds: Range) -> float:
    lo, hi = float(bounds[0]), float(bounds[1])
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def sample_transform(spec: TransformSpec,
                     rng_state: Union[np.random.Generator, int, None] = None) -> ConcreteTransform:
    """
    Выбирает одно конкретное преобразование из диапазонов TransformSpec

    Args:
        spec: Диапазоны преобразований
        rng_state: Генератор, целый сид или None (тогда используется spec.seed)

    Raises:
        InvalidConfigError: пустой или недопустимый диапазон
    """
    spec.validate()
    if rng_state is None:
        rng = np.random.default_rng(spec.seed)
    elif isinstance(rng_state, np.random.Generator):
        rng = rng_state
    else:
        rng = np.random.default_rng(int(rng_state))

    return ConcreteTransform(
        rotation_deg=_draw(rng, spec.rotation_deg),
        scale_ratio=_draw(rng, spec.scale_ratio),
        jitter_x=_draw(rng, spec.jitter),
        jitter_y=_draw(rng, spec.jitter),
        brightness=_draw(rng, spec.brightness),
    )


def _reference_box(place: Placement, height: int, width: int) -> BoundingBox:
    if place.full_image:
        return BoundingBox(0.0, 0.0, float(width), float(height))
    if place.target_box is not None:
        return place.target_box
    if place.anchor == 'center-of-box':
        raise PlacementError("anchor=center-of-box требует целевой бокс (нет GT-бокса)")
    # Фиксированные координаты без бокса: размер считается от всего изображения
    return BoundingBox(0.0, 0.0, float(width), float(height))


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def stamp_tensor(image: torch.Tensor, patch: torch.Tensor, shape_mask: np.ndarray,
                 transform: ConcreteTransform, place: Placement) -> Tuple[torch.Tensor, np.ndarray]:
    """
    Дифференцируемое наложение патча на изображение (тензоры H x W x 3)

    Пиксели патча интерполируются билинейно, маска берется ближайшим соседом.
    Возвращает новое изображение и булеву маску размещения.
    """
    height, width = image.shape[0], image.shape[1]
    ph, pw = patch.shape[0], patch.shape[1]

    box = _reference_box(place, height, width)
    if place.anchor == 'fixed-coordinates':
        if place.center is None:
            raise PlacementError("anchor=fixed-coordinates требует координаты центра")
        cx, cy = place.center
    elif place.anchor == 'center-of-box':
        cx, cy = box.center
    else:
        raise PlacementError(f"Неизвестный якорь размещения: {place.anchor}")
    cx += transform.jitter_x * box.width
    cy += transform.jitter_y * box.height

    k = math.sqrt(transform.scale_ratio * box.area / (ph * pw))
    out_h = ph * k
    out_w = pw * k
    # Левый верхний угол выравнивается по сетке пикселей
    top = _round_half_up(cy - out_h / 2.0)
    left = _round_half_up(cx - out_w / 2.0)
    cy = top + out_h / 2.0
    cx = left + out_w / 2.0

    theta = math.radians(transform.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    if transform.rotation_deg % 360.0 == 0.0:
        cos_t, sin_t = 1.0, 0.0
        half_h, half_w = out_h / 2.0, out_w / 2.0
    else:
        half_h = half_w = 0.5 * math.hypot(out_h, out_w)

    r0 = max(0, int(math.floor(cy - half_h)) - 1)
    r1 = min(height, int(math.ceil(cy + half_h)) + 1)
    c0 = max(0, int(math.floor(cx - half_w)) - 1)
    c1 = min(width, int(math.ceil(cx + half_w)) + 1)

    full_mask = np.zeros((height, width), dtype=bool)
    if r0 >= r1 or c0 >= c1:
        # Патч целиком за границей изображения
        return image.clone(), full_mask

    ii, jj = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing='ij')
    dy = ii + 0.5 - cy
    dx = jj + 0.5 - cx
    v = (cos_t * dy - sin_t * dx) / k + ph / 2.0 - 0.5
    u = (sin_t * dy + cos_t * dx) / k + pw / 2.0 - 0.5

    # Маска: ближайший сосед
    vi = np.floor(v + 0.5).astype(np.int64)
    ui = np.floor(u + 0.5).astype(np.int64)
    inside = (vi >= 0) & (vi < ph) & (ui >= 0) & (ui < pw)
    region_mask = np.zeros(v.shape, dtype=bool)
    region_mask[inside] = shape_mask[vi[inside], ui[inside]]

    # Пиксели: билинейная интерполяция с повтором краев
    vc = np.clip(v, 0.0, ph - 1.0)
    uc = np.clip(u, 0.0, pw - 1.0)
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(ph - 2, 0))
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(pw - 2, 0))
    v1 = np.minimum(v0 + 1, ph - 1)
    u1 = np.minimum(u0 + 1, pw - 1)
    fv = torch.from_numpy(vc - v0).to(patch.dtype).unsqueeze(-1)
    fu = torch.from_numpy(uc - u0).to(patch.dtype).unsqueeze(-1)

    p00 = patch[torch.from_numpy(v0), torch.from_numpy(u0)]
    p01 = patch[torch.from_numpy(v0), torch.from_numpy(u1)]
    p10 = patch[torch.from_numpy(v1), torch.from_numpy(u0)]
    p11 = patch[torch.from_numpy(v1), torch.from_numpy(u1)]
    sampled = ((1 - fv) * (1 - fu)) * p00 + ((1 - fv) * fu) * p01 \
        + (fv * (1 - fu)) * p10 + (fv * fu) * p11
    values = torch.clamp(transform.brightness * sampled, 0.0, 1.0)

    out = image.clone()
    mask_t = torch.from_numpy(region_mask).unsqueeze(-1)
    out[r0:r1, c0:c1] = torch.where(mask_t, values, image[r0:r1, c0:c1])
    full_mask[r0:r1, c0:c1] = region_mask
    return out, full_mask


def apply_patch(x: ImageBuffer, p: Patch, t: ConcreteTransform,
                place: Placement) -> Tuple[ImageBuffer, BinaryMask]:
    """
    Накладывает патч на изображение

    Returns:
        (изображение с патчем, маска размещения); вне маски пиксели побитово равны x
    """
    with torch.no_grad():
        out, mask = stamp_tensor(torch.from_numpy(x.pixels), p.tensor(), p.shape_mask, t, place)
    return ImageBuffer(out.numpy(), x.id), BinaryMask(mask, x.id)


def apply_patches(x: ImageBuffer, p: Patch, transforms: Sequence[ConcreteTransform],
                  placements: Sequence[Placement]) -> Tuple[ImageBuffer, BinaryMask]:
    """Последовательно ставит несколько копий патча; маска - объединение"""
    if len(transforms) != len(placements):
        raise InvalidInputError("Число преобразований не совпадает с числом размещений")
    image = torch.from_numpy(x.pixels)
    union = np.zeros((x.height, x.width), dtype=bool)
    with torch.no_grad():
        for transform, place in zip(transforms, placements):
            image, mask = stamp_tensor(image, p.tensor(), p.shape_mask, transform, place)
            union |= mask
    return ImageBuffer(image.numpy(), x.id), BinaryMask(union, x.id)


def default_placements(gt: GroundTruthSet, patches_per_person: int = 1,
                       max_patches: Optional[int] = None) -> List[Placement]:
    """
    Размещения по умолчанию: патч по центру каждого человека из разметки

    При patches_per_person > 1 патчи распределяются по высоте бокса
    (сценарий с несколькими патчами на объект).
    """
    placements = []
    for box in gt.persons():
        if patches_per_person <= 1:
            placements.append(Placement(target_box=box))
            continue
        cx = box.center[0]
        for i in range(patches_per_person):
            cy = box.y_min + (i + 0.5) * box.height / patches_per_person
            placements.append(Placement(target_box=box, anchor='fixed-coordinates', center=(cx, cy)))
    if max_patches is not None:
        placements = placements[:max_patches]
    return placements
