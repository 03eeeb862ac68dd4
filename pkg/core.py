"""
Общие доменные типы и примитивы над пикселями и боксами
"""
import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from errors import InvalidInputError

PERSON_CLASS = 0


@dataclass
class ImageBuffer:
    """
    Изображение H x W x 3 со значениями в [0, 1] (channel-last)
    """
    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidInputError(f"Ожидается массив H x W x 3, получено {pixels.shape}")
        if pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise InvalidInputError("Пустое изображение")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidInputError(f"Значения пикселей вне [0, 1] в изображении '{self.id}'")
        self.pixels = pixels

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, array: np.ndarray, image_id: str = "") -> "ImageBuffer":
        """8-битные пиксели переводятся делением на 255"""
        return cls(np.asarray(array, dtype=np.float64) / 255.0, image_id)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class BoundingBox:
    """Бокс в пикселях, углы непрерывные; score отсутствует у ground truth"""
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = PERSON_CLASS
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"Нечисловые координаты бокса: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidInputError(f"Вырожденный бокс: {coords}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"Score вне [0, 1]: {self.score}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def to_dict(self) -> Dict[str, Any]:
        row = {
            'box': [self.x_min, self.y_min, self.x_max, self.y_max],
            'class_id': self.class_id,
        }
        if self.score is not None:
            row['score'] = self.score
        return row

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "BoundingBox":
        x_min, y_min, x_max, y_max = (float(v) for v in row['box'])
        score = row.get('score')
        return cls(x_min, y_min, x_max, y_max,
                   class_id=int(row.get('class_id', PERSON_CLASS)),
                   score=None if score is None else float(score))


@dataclass
class DetectionSet:
    """Детекции одного изображения; после normalized() отсортированы по score"""
    image_id: str
    boxes: List[BoundingBox] = field(default_factory=list)

    def normalized(self) -> "DetectionSet":
        ordered = sorted(self.boxes, key=lambda b: -(b.score if b.score is not None else 0.0))
        return DetectionSet(self.image_id, ordered)

    def of_class(self, class_id: int) -> List[BoundingBox]:
        return [b for b in self.boxes if b.class_id == class_id]

    def to_dict(self) -> Dict[str, Any]:
        return {'image_id': self.image_id, 'boxes': [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "DetectionSet":
        return cls(row['image_id'], [BoundingBox.from_dict(b) for b in row.get('boxes', [])])


@dataclass
class GroundTruthSet(DetectionSet):
    """Разметка изображения (боксы без score)"""

    def persons(self) -> List[BoundingBox]:
        return self.of_class(PERSON_CLASS)

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "GroundTruthSet":
        return cls(row['image_id'], [BoundingBox.from_dict(b) for b in row.get('boxes', [])])


@dataclass
class BinaryMask:
    """Булева маска H x W, привязанная к изображению"""
    bits: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise InvalidInputError(f"Маска должна быть двумерной, получено {bits.shape}")
        self.bits = bits.astype(bool)

    @property
    def shape(self):
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def empty_like(cls, image: ImageBuffer) -> "BinaryMask":
        return cls(np.zeros((image.height, image.width), dtype=bool), image.id)


@dataclass(frozen=True)
class PixelConfusion:
    """Попиксельный подсчет TP/FP/FN предсказанной маски патча"""
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise InvalidInputError("Счетчики PixelConfusion не могут быть отрицательными")

    @property
    def denominator(self) -> int:
        return self.tp + self.fp + self.fn

    def __add__(self, other: "PixelConfusion") -> "PixelConfusion":
        return PixelConfusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Отношение площади пересечения к площади объединения; 0 для непересекающихся"""
    if a.area <= 0 or b.area <= 0:
        raise InvalidInputError("Бокс нулевой площади")

    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def pixel_confusion(pred: BinaryMask, gt: BinaryMask) -> PixelConfusion:
    """Точный попиксельный подсчет предсказанной маски против истинной"""
    if pred.shape != gt.shape:
        raise InvalidInputError(f"Формы масок не совпадают: {pred.shape} vs {gt.shape}")
    p = pred.bits
    g = gt.bits
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return PixelConfusion(tp, fp, fn)


def rasterize_box(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Растеризация по полуоткрытому правилу [min, max): пиксель входит, если его центр внутри"""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    rows = (ys >= box.y_min) & (ys < box.y_max)
    cols = (xs >= box.x_min) & (xs < box.x_max)
    return rows[:, None] & cols[None, :]


def derive_seed(root_seed: int, name: str) -> int:
    """Именованный под-сид из корневого (attack, split, transform, ...)"""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode('utf-8')).hexdigest()
    return int(digest[:8], 16)
