"""
Метрики оценки: AP@0.5, ASR, SmIoU/NmIoU, время работы защиты и сводные отчеты
"""
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import config
from core import BinaryMask, BoundingBox, DetectionSet, GroundTruthSet, ImageBuffer, PERSON_CLASS, \
    PixelConfusion, box_iou, pixel_confusion
from errors import InvalidInputError, UndefinedMetricError
from logger_config import log_info, log_warning


@dataclass
class EvalRecord:
    """
    Результат обработки одного изображения одной тройкой (атака, защита, детектор)

    Маски в JSON не сериализуются: сохраняется только попиксельная статистика.
    """
    image_id: str
    attack_name: str
    defense_name: str
    detector_name: str
    detections: DetectionSet
    gt: GroundTruthSet
    pred_mask: Optional[BinaryMask] = None
    gt_mask: Optional[BinaryMask] = None
    defense_ms: float = 0.0
    patch_fraction: Optional[float] = None
    confusion: Optional[PixelConfusion] = None
    failed: bool = False
    error: Optional[str] = None

    def __post_init__(self):
        if self.defense_ms < 0:
            raise InvalidInputError("defense_ms не может быть отрицательным")
        if self.confusion is None and self.pred_mask is not None and self.gt_mask is not None:
            self.confusion = pixel_confusion(self.pred_mask, self.gt_mask)

    def to_dict(self) -> Dict[str, Any]:
        row = {
            'image_id': self.image_id,
            'attack_name': self.attack_name,
            'defense_name': self.defense_name,
            'detector_name': self.detector_name,
            'detections': self.detections.to_dict(),
            'gt': self.gt.to_dict(),
            'defense_ms': self.defense_ms,
            'patch_fraction': self.patch_fraction,
            'failed': self.failed,
            'error': self.error,
        }
        if self.confusion is not None:
            row['confusion'] = {'tp': self.confusion.tp, 'fp': self.confusion.fp, 'fn': self.confusion.fn}
        return row

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "EvalRecord":
        confusion = row.get('confusion')
        return cls(
            image_id=row['image_id'],
            attack_name=row['attack_name'],
            defense_name=row['defense_name'],
            detector_name=row['detector_name'],
            detections=DetectionSet.from_dict(row['detections']),
            gt=GroundTruthSet.from_dict(row['gt']),
            defense_ms=float(row.get('defense_ms', 0.0)),
            patch_fraction=row.get('patch_fraction'),
            confusion=None if confusion is None else PixelConfusion(**confusion),
            failed=bool(row.get('failed', False)),
            error=row.get('error'),
        )


@dataclass
class TimeCost:
    mean_ms: float
    samples_ms: List[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.samples_ms)


@dataclass
class MetricReport:
    """Сводка метрик; None означает, что метрика не определена на этих данных"""
    ap50: Optional[float] = None
    asr: Optional[float] = None
    smiou: Optional[float] = None
    nmiou: Optional[float] = None
    mean_defense_ms: Optional[float] = None
    records: int = 0
    failed: int = 0
    per_detector: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    per_attack: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'ap50': self.ap50,
            'asr': self.asr,
            'smiou': self.smiou,
            'nmiou': self.nmiou,
            'mean_defense_ms': self.mean_defense_ms,
            'records': self.records,
            'failed': self.failed,
            'per_detector': self.per_detector,
            'per_attack': self.per_attack,
        }


def _usable(records: Iterable[EvalRecord]) -> List[EvalRecord]:
    return [r for r in records if not r.failed]


def _match_image(detections: Sequence[BoundingBox], gts: Sequence[BoundingBox],
                 iou_thr: float) -> List[Tuple[float, bool]]:
    """Жадное сопоставление: детекции по убыванию score, каждый GT не более одного раза"""
    matched = [False] * len(gts)
    results = []
    for det in sorted(detections, key=lambda b: -(b.score or 0.0)):
        best, best_iou = -1, iou_thr
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = box_iou(det, gt)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
        results.append((det.score or 0.0, best >= 0))
    return results


def precision_recall(records: Sequence[EvalRecord], iou_thr: float = 0.5,
                     class_id: int = PERSON_CLASS) -> Tuple[np.ndarray, np.ndarray]:
    """Кривая точность-полнота по всем изображениям"""
    scored = []
    total_gt = 0
    for record in _usable(records):
        gts = record.gt.of_class(class_id)
        total_gt += len(gts)
        scored.extend(_match_image(record.detections.of_class(class_id), gts, iou_thr))
    if total_gt == 0:
        raise UndefinedMetricError("Нет GT-объектов: AP не определен")

    # Стабильная сортировка сохраняет порядок изображений при равных score
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    hits = np.array([scored[i][1] for i in order], dtype=np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return precision, recall


def ap_at_iou(records: Sequence[EvalRecord], iou_thr: float = 0.5, class_id: int = PERSON_CLASS,
              interpolation: str = 'all-point') -> float:
    """
    Average precision класса при пороге IoU

    Args:
        interpolation: 'all-point' (площадь под огибающей) или '11-point'

    Raises:
        UndefinedMetricError: в записях нет ни одного GT этого класса
    """
    precision, recall = precision_recall(records, iou_thr, class_id)
    if len(precision) == 0:
        return 0.0

    if interpolation == '11-point':
        points = []
        for r in np.linspace(0.0, 1.0, 11):
            reached = precision[recall >= r - 1e-12]
            points.append(reached.max() if len(reached) else 0.0)
        return float(np.mean(points))
    if interpolation != 'all-point':
        raise InvalidInputError(f"Неизвестная интерполяция: {interpolation}")

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def persons_hidden(record: EvalRecord, conf_thr: float = 0.5, iou_thr: float = 0.5) -> Tuple[int, int]:
    """(скрытые люди, все люди) на одном изображении"""
    survivors = [b for b in record.detections.of_class(PERSON_CLASS)
                 if b.score is not None and b.score >= conf_thr]
    persons = record.gt.persons()
    hidden = sum(1 for gt in persons if not any(box_iou(d, gt) >= iou_thr for d in survivors))
    return hidden, len(persons)


def asr(records: Sequence[EvalRecord], conf_thr: float = 0.5, iou_thr: float = 0.5) -> float:
    """Доля GT-людей без выжившей детекции (score >= conf_thr и IoU >= iou_thr)"""
    hidden = total = 0
    for record in _usable(records):
        h, t = persons_hidden(record, conf_thr, iou_thr)
        hidden += h
        total += t
    if total == 0:
        raise UndefinedMetricError("Нет GT-людей: ASR не определен")
    return hidden / total


def detection_rate(records: Sequence[EvalRecord], conf_thr: float = 0.5, iou_thr: float = 0.5) -> float:
    return 1.0 - asr(records, conf_thr, iou_thr)


def smiou(confusions: Sequence[PixelConfusion]) -> float:
    """Суммарный IoU: Σ TP / Σ (FP + TP + FN)"""
    if not confusions:
        raise UndefinedMetricError("Пустой список для SmIoU")
    total = sum(confusions, PixelConfusion(0, 0, 0))
    if total.denominator == 0:
        raise UndefinedMetricError("Все знаменатели SmIoU равны нулю")
    return total.tp / total.denominator


def nmiou(confusions: Sequence[PixelConfusion]) -> float:
    """
    Средний по изображениям IoU

    Изображение с нулевым знаменателем (обе маски пусты) дает 1.
    """
    if not confusions:
        raise UndefinedMetricError("Пустой список для NmIoU")
    values = [1.0 if c.denominator == 0 else c.tp / c.denominator for c in confusions]
    return float(sum(values) / len(values))


def record_confusions(records: Sequence[EvalRecord]) -> List[PixelConfusion]:
    return [r.confusion for r in _usable(records) if r.confusion is not None]


def time_cost(defense: Any, corpus: Sequence[ImageBuffer], warmup: Optional[int] = None) -> TimeCost:
    """
    Среднее время обработки изображения защитой (мс)

    Первые warmup изображений не учитываются; замер строго последовательный.
    defense - объект с методом defend или произвольный вызываемый объект.
    """
    if warmup is None:
        warmup = config.METRIC_SETTINGS['timing_warmup']
    run: Callable = defense.defend if hasattr(defense, 'defend') else defense
    samples = []
    for i, image in enumerate(corpus):
        start = time.perf_counter()
        run(image)
        elapsed = (time.perf_counter() - start) * 1000.0
        if i >= warmup:
            samples.append(elapsed)
    if not samples:
        log_warning('evaluation', f"Для замера времени нужно больше {warmup} изображений")
        return TimeCost(0.0, [])
    return TimeCost(float(np.mean(samples)), samples)


def defense_gain(defended: Sequence[EvalRecord], undefended: Sequence[EvalRecord],
                 iou_thr: float = 0.5) -> float:
    """Прирост AP от защиты (AP с защитой минус AP без нее)"""
    return ap_at_iou(defended, iou_thr) - ap_at_iou(undefended, iou_thr)


def _optional(metric: Callable, *args, **kwargs) -> Optional[float]:
    try:
        return metric(*args, **kwargs)
    except UndefinedMetricError:
        return None


def size_sweep(records: Sequence[EvalRecord], bins: Optional[Sequence[float]] = None) -> List[Dict[str, Any]]:
    """SmIoU, NmIoU и AP по корзинам относительной площади патча [lo, hi)"""
    if bins is None:
        bins = config.METRIC_SETTINGS['size_bins']
    rows = []
    usable = [r for r in _usable(records) if r.patch_fraction is not None]
    for lo, hi in zip(bins[:-1], bins[1:]):
        last = hi == bins[-1]
        chosen = [r for r in usable if lo <= r.patch_fraction < hi or (last and r.patch_fraction == hi)]
        confusions = record_confusions(chosen)
        rows.append({
            'bin_lo': lo,
            'bin_hi': hi,
            'images': len(chosen),
            'smiou': _optional(smiou, confusions),
            'nmiou': _optional(nmiou, confusions),
            'ap50': _optional(ap_at_iou, chosen) if chosen else None,
        })
    return rows


def _core_metrics(records: Sequence[EvalRecord], settings: Dict[str, Any]) -> Dict[str, Optional[float]]:
    confusions = record_confusions(records)
    times = [r.defense_ms for r in _usable(records)]
    return {
        'ap50': _optional(ap_at_iou, records, settings['iou_threshold'],
                          interpolation=settings['interpolation']),
        'asr': _optional(asr, records, settings['confidence_threshold'], settings['iou_threshold']),
        'smiou': _optional(smiou, confusions),
        'nmiou': _optional(nmiou, confusions),
        'mean_defense_ms': float(np.mean(times)) if times else None,
    }


def summarize(records: Sequence[EvalRecord], settings: Optional[Dict[str, Any]] = None) -> MetricReport:
    """Сводный отчет с разбивкой по детекторам и атакам"""
    settings = config.merged('metrics', settings)
    overall = _core_metrics(records, settings)

    by_detector = defaultdict(list)
    by_attack = defaultdict(list)
    for record in records:
        by_detector[record.detector_name].append(record)
        by_attack[record.attack_name].append(record)

    report = MetricReport(
        records=len(records),
        failed=sum(1 for r in records if r.failed),
        per_detector={name: _core_metrics(group, settings) for name, group in sorted(by_detector.items())},
        per_attack={name: _core_metrics(group, settings) for name, group in sorted(by_attack.items())},
        **overall,
    )
    log_info('evaluation', f"Сводка по {report.records} записям: AP50={report.ap50} ASR={report.asr}")
    return report
