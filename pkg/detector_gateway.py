"""
Контракт детектора и встроенный дифференцируемый toy-детектор

Toy-детектор считает нормированную корреляцию скользящего окна с шаблоном и
сжимает ее логистикой, поэтому весь цикл атаки работает без обученных весов.
"""
import json
import math
import subprocess
import tempfile
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

import config
from core import BoundingBox, DetectionSet, GroundTruthSet, ImageBuffer, PERSON_CLASS, box_iou
from errors import AdapterError, InvalidConfigError, InvalidInputError
from logger_config import log_error, log_info


@dataclass
class CandidateField:
    """Дифференцируемые уверенности всех кандидатов и их боксы"""
    scores: torch.Tensor
    boxes: np.ndarray          # L x 4: x_min, y_min, x_max, y_max
    class_ids: np.ndarray      # L

    def __len__(self):
        return int(self.scores.shape[0])

    def box(self, index: int, with_score: bool = False) -> BoundingBox:
        x0, y0, x1, y1 = (float(v) for v in self.boxes[index])
        score = float(self.scores[index].detach()) if with_score else None
        return BoundingBox(x0, y0, x1, y1, class_id=int(self.class_ids[index]), score=score)


class Detector(ABC):
    """
    Контракт детектора: detect() для оценки, confidence_field() для white-box атак
    """
    name = 'detector'
    thread_safe = True
    supports_gradients = True

    @abstractmethod
    def detect(self, x: ImageBuffer) -> DetectionSet:
        """Детекции с score в [0, 1], отсортированные по убыванию"""

    def confidence_field(self, x: torch.Tensor) -> CandidateField:
        raise AdapterError(f"Детектор '{self.name}' не предоставляет градиенты")


def nms(boxes: Sequence[BoundingBox], iou_threshold: float = 0.5) -> List[BoundingBox]:
    """Жадное подавление немаксимумов: бокс отбрасывается при IoU >= порога с уже принятым"""
    ordered = sorted(boxes, key=lambda b: -(b.score or 0.0))
    kept: List[BoundingBox] = []
    for candidate in ordered:
        if all(box_iou(candidate, other) < iou_threshold for other in kept):
            kept.append(candidate)
    return kept


def make_toy_template(side: int, grid: int, levels: Tuple[float, float], seed: int) -> np.ndarray:
    """
    Шаблон "человека": блочный узор grid x grid с уровнями levels по каналам
    """
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(grid, grid, 3))
    for c in range(3):
        # В каждом канале должны встречаться оба уровня
        if bits[:, :, c].min() == bits[:, :, c].max():
            bits[0, 0, c] = 1 - bits[0, 0, c]
    lo, hi = levels
    cells = np.where(bits == 1, hi, lo).astype(np.float64)
    block = int(math.ceil(side / grid))
    template = np.repeat(np.repeat(cells, block, axis=0), block, axis=1)
    return template[:side, :side]


class ToyDetector(Detector):
    """
    Корреляционный детектор людей

    Уверенность окна: sigmoid((ncc - center) / temperature), где ncc -
    нормированная корреляция окна с шаблоном.
    """
    supports_gradients = True
    thread_safe = True

    def __init__(self, template: np.ndarray, stride: int = 4, temperature: float = 0.05,
                 center: float = 0.65, confidence_threshold: float = 0.5, nms_iou: float = 0.5,
                 name: str = 'toy'):
        template = np.asarray(template, dtype=np.float64)
        if template.ndim != 3 or template.shape[0] != template.shape[1] or template.shape[2] != 3:
            raise InvalidConfigError("Шаблон должен быть квадратным массивом k x k x 3")
        if temperature <= 0:
            raise InvalidConfigError("temperature должна быть > 0")
        if stride < 1:
            raise InvalidConfigError("stride должен быть >= 1")

        self.template = template
        self.side = template.shape[0]
        self.stride = int(stride)
        self.temperature = float(temperature)
        self.center = float(center)
        self.confidence_threshold = float(confidence_threshold)
        self.nms_iou = float(nms_iou)
        self.name = name

        flat = torch.from_numpy(template).permute(2, 0, 1).reshape(-1)
        self._template_centered = flat - flat.mean()
        self._template_norm = torch.linalg.norm(self._template_centered)
        if float(self._template_norm) == 0.0:
            raise InvalidConfigError("Шаблон не должен быть постоянным")

    @classmethod
    def from_settings(cls, settings: Optional[Dict[str, Any]] = None) -> "ToyDetector":
        settings = config.merged('toy_detector', settings)
        template = make_toy_template(settings['template_side'], settings['template_grid'],
                                     tuple(settings['template_levels']), settings['seed'])
        return cls(template, stride=settings['stride'], temperature=settings['temperature'],
                   center=settings['center'], confidence_threshold=settings['confidence_threshold'],
                   nms_iou=settings['nms_iou'])

    def logistic(self, correlation: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid((correlation - self.center) / self.temperature)

    def window_grid(self, height: int, width: int) -> Tuple[int, int]:
        if height < self.side or width < self.side:
            raise InvalidInputError(
                f"Изображение {height}x{width} меньше шаблона {self.side}x{self.side}")
        return (height - self.side) // self.stride + 1, (width - self.side) // self.stride + 1

    def correlation(self, x: torch.Tensor) -> torch.Tensor:
        """Нормированная корреляция каждого окна с шаблоном (тензор L)"""
        self.window_grid(x.shape[0], x.shape[1])
        batch = x.permute(2, 0, 1).unsqueeze(0)
        windows = F.unfold(batch, kernel_size=self.side, stride=self.stride)[0]
        centered = windows - windows.mean(dim=0, keepdim=True)
        template = self._template_centered.to(x.dtype)
        numerator = template @ centered
        denominator = torch.sqrt((centered * centered).sum(dim=0) + 1e-12) * self._template_norm.to(x.dtype)
        return numerator / denominator

    def confidence_field(self, x: torch.Tensor) -> CandidateField:
        rows, cols = self.window_grid(x.shape[0], x.shape[1])
        scores = self.logistic(self.correlation(x))
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing='ij')
        x0 = (cc.reshape(-1) * self.stride).astype(np.float64)
        y0 = (rr.reshape(-1) * self.stride).astype(np.float64)
        boxes = np.stack([x0, y0, x0 + self.side, y0 + self.side], axis=1)
        class_ids = np.full(len(x0), PERSON_CLASS, dtype=np.int64)
        return CandidateField(scores, boxes, class_ids)

    def detect(self, x: ImageBuffer) -> DetectionSet:
        with torch.no_grad():
            candidates = self.confidence_field(torch.from_numpy(x.pixels))
        scores = candidates.scores.numpy()
        above = np.nonzero(scores > self.confidence_threshold)[0]
        boxes = [candidates.box(int(i), with_score=True) for i in above]
        return DetectionSet(x.id, nms(boxes, self.nms_iou)).normalized()

    def confidence_gradient(self, x: ImageBuffer, candidate: int) -> np.ndarray:
        """Точный градиент уверенности кандидата по пикселям входа"""
        image = torch.from_numpy(x.pixels.copy()).requires_grad_(True)
        field = self.confidence_field(image)
        field.scores[candidate].backward()
        return image.grad.numpy()


class ExternalDetectorAdapter(Detector):
    """
    Детектор во внешнем процессе: запрос - путь к PNG, ответ - JSON-список детекций
    ({image_id, class_id, score, box}) в stdout команды
    """
    supports_gradients = False

    def __init__(self, name: str, command: Sequence[str], thread_safe: bool = False,
                 timeout: float = 120.0):
        if not command:
            raise InvalidConfigError(f"Для внешнего детектора '{name}' не задана команда")
        self.name = name
        self.command = list(command)
        self.thread_safe = bool(thread_safe)
        self.timeout = timeout

    def detect(self, x: ImageBuffer) -> DetectionSet:
        from image_io import save_image

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / f"{x.id or 'image'}.png"
            save_image(x, path)
            try:
                result = subprocess.run(self.command + [str(path)], capture_output=True,
                                        text=True, timeout=self.timeout, check=True)
                rows = json.loads(result.stdout)
                boxes = [BoundingBox(*(float(v) for v in row['box']),
                                     class_id=int(row.get('class_id', row.get('class', PERSON_CLASS))),
                                     score=float(row['score']))
                         for row in rows]
            except (subprocess.SubprocessError, OSError, ValueError, KeyError, TypeError) as e:
                log_error('evaluation', e, context=f"detector={self.name} image={x.id}")
                raise AdapterError(f"Внешний детектор '{self.name}' не ответил корректно: {e}") from e
        return DetectionSet(x.id, boxes).normalized()


def check_conformance(detector: Detector, images: Sequence[ImageBuffer]) -> List[str]:
    """
    Проверки адаптера: диапазон score, валидность боксов, сортировка,
    идемпотентность NMS. Возвращает список найденных нарушений.
    """
    issues = []
    for image in images:
        try:
            detections = detector.detect(image)
        except Exception as e:
            issues.append(f"{image.id}: detect() упал: {e}")
            continue
        scores = [b.score for b in detections.boxes]
        if any(s is None or not (0.0 <= s <= 1.0) for s in scores):
            issues.append(f"{image.id}: score вне [0, 1]")
        if scores != sorted(scores, reverse=True):
            issues.append(f"{image.id}: детекции не отсортированы по score")
        for b in detections.boxes:
            if b.x_max > image.width + 1e-6 or b.y_max > image.height + 1e-6 or b.x_min < -1e-6 or b.y_min < -1e-6:
                issues.append(f"{image.id}: бокс вне изображения {b.to_dict()['box']}")
        nms_iou = getattr(detector, 'nms_iou', 0.5)
        if len(nms(detections.boxes, nms_iou)) != len(detections.boxes):
            issues.append(f"{image.id}: NMS не идемпотентен")
    log_info('evaluation', f"Проверка детектора {detector.name}: {len(issues)} нарушений")
    return issues


def make_toy_corpus(detector: ToyDetector, n_images: int, side: int = 96,
                    persons_per_image: int = 1, seed: int = 0,
                    background: float = 0.5) -> List[Tuple[ImageBuffer, GroundTruthSet]]:
    """
    Синтетический корпус: копии шаблона на постоянном фоне, позиции кратны stride
    """
    rng = np.random.default_rng(seed)
    k = detector.side
    slots = (side - k) // detector.stride + 1
    corpus = []
    for n in range(n_images):
        pixels = np.full((side, side, 3), background)
        boxes: List[BoundingBox] = []
        attempts = 0
        while len(boxes) < persons_per_image:
            attempts += 1
            if attempts > 1000:
                raise InvalidConfigError("Не удается разместить людей без пересечений: увеличьте side")
            top = int(rng.integers(0, slots)) * detector.stride
            left = int(rng.integers(0, slots)) * detector.stride
            candidate = BoundingBox(float(left), float(top), float(left + k), float(top + k))
            # Окна соседних людей не должны перекрываться
            margin = detector.stride
            if any(not (candidate.x_min >= b.x_max + margin or candidate.x_max + margin <= b.x_min
                        or candidate.y_min >= b.y_max + margin or candidate.y_max + margin <= b.y_min)
                   for b in boxes):
                continue
            pixels[top:top + k, left:left + k] = detector.template
            boxes.append(candidate)
        image_id = f"toy_{n:04d}"
        corpus.append((ImageBuffer(pixels, image_id), GroundTruthSet(image_id, boxes)))
    return corpus


def build_detector(spec: Any, settings: Optional[Dict[str, Any]] = None) -> Detector:
    """
    Реестр детекторов: 'toy' или {'id': 'external', 'name': ..., 'command': [...]}
    """
    if spec == 'toy' or (isinstance(spec, dict) and spec.get('id') == 'toy'):
        overrides = dict(settings or {})
        if isinstance(spec, dict):
            overrides.update(spec.get('settings', {}))
        return ToyDetector.from_settings(overrides)
    if isinstance(spec, dict) and spec.get('id') == 'external':
        return ExternalDetectorAdapter(spec.get('name', 'external'), spec.get('command', []),
                                       thread_safe=bool(spec.get('thread_safe', False)))
    raise InvalidConfigError(f"Неизвестный детектор: {spec}")
