"""
Лидерборд: средний и минимальный AP@0.5 по (детектор, защита), строка времени,
отметки лучшего (жирный) и второго (подчеркнутый) результата в строке
"""
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import UndefinedMetricError
from metrics import EvalRecord, ap_at_iou

BASELINE = 'w/o defense'
CLEAN_ATTACK = 'clean'
BEST, SECOND = 'best', 'second'


@dataclass
class LeaderboardCell:
    mean_ap: Optional[float]
    min_ap: Optional[float]
    mean_marker: Optional[str] = None
    min_marker: Optional[str] = None


@dataclass
class Leaderboard:
    detectors: List[str] = field(default_factory=list)
    defenses: List[str] = field(default_factory=list)
    cells: Dict[Tuple[str, str], LeaderboardCell] = field(default_factory=dict)
    baseline: Dict[str, LeaderboardCell] = field(default_factory=dict)
    time_cost_ms: Dict[str, Optional[float]] = field(default_factory=dict)

    @classmethod
    def from_cells(cls, cells: Dict[Tuple[str, str], Tuple[Optional[float], Optional[float]]],
                   baseline: Optional[Dict[str, Tuple[Optional[float], Optional[float]]]] = None,
                   time_cost_ms: Optional[Dict[str, Optional[float]]] = None) -> "Leaderboard":
        """Строит лидерборд из готовых пар (mean AP, min AP) и расставляет отметки"""
        detectors, defenses = [], []
        for detector, defense in cells:
            if detector not in detectors:
                detectors.append(detector)
            if defense not in defenses:
                defenses.append(defense)
        for detector in (baseline or {}):
            if detector not in detectors:
                detectors.append(detector)
        board = cls(
            detectors=detectors,
            defenses=defenses,
            cells={key: LeaderboardCell(*value) for key, value in cells.items()},
            baseline={key: LeaderboardCell(*value) for key, value in (baseline or {}).items()},
            time_cost_ms=dict(time_cost_ms or {}),
        )
        board.mark()
        return board

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord], time_cost_ms: Optional[Dict[str, float]] = None,
                     iou_thr: float = 0.5) -> "Leaderboard":
        """
        AP по каждой атаке, затем среднее и минимум по атакам

        Записи без защиты (defense_name == 'w/o defense') идут в базовую колонку,
        записи чистых изображений в лидерборд не попадают.
        """
        groups: Dict[Tuple[str, str], Dict[str, List[EvalRecord]]] = OrderedDict()
        for record in records:
            if record.attack_name == CLEAN_ATTACK:
                continue
            key = (record.detector_name, record.defense_name)
            groups.setdefault(key, defaultdict(list))[record.attack_name].append(record)

        cells, baseline = {}, {}
        for (detector, defense), by_attack in groups.items():
            values = []
            for attack in sorted(by_attack):
                try:
                    values.append(ap_at_iou(by_attack[attack], iou_thr))
                except UndefinedMetricError:
                    continue
            summary = (float(np.mean(values)), float(np.min(values))) if values else (None, None)
            if defense == BASELINE:
                baseline[detector] = summary
            else:
                cells[(detector, defense)] = summary
        return cls.from_cells(cells, baseline, time_cost_ms)

    def mark(self):
        """Отметки лучшего и второго значения в каждой строке, отдельно для mean и min"""
        for detector in self.detectors:
            row = [(d, self.cells[(detector, d)]) for d in self.defenses if (detector, d) in self.cells]
            for attr, marker_attr in (('mean_ap', 'mean_marker'), ('min_ap', 'min_marker')):
                for _, cell in row:
                    setattr(cell, marker_attr, None)
                ranked = sorted((c for c in row if getattr(c[1], attr) is not None),
                                key=lambda c: -getattr(c[1], attr))
                for (_, cell), marker in zip(ranked, (BEST, SECOND)):
                    setattr(cell, marker_attr, marker)

    @staticmethod
    def _format(value: Optional[float], marker: Optional[str]) -> str:
        if value is None:
            return '-'
        text = f"{value * 100:.2f}"
        if marker == BEST:
            return f"**{text}**"
        if marker == SECOND:
            return f"<u>{text}</u>"
        return text

    def to_markdown(self) -> str:
        header = ['Detector', BASELINE] + self.defenses
        lines = ['| ' + ' | '.join(header) + ' |', '|' + '---|' * len(header)]
        for detector in self.detectors:
            base = self.baseline.get(detector)
            row = [detector, '-' if base is None else
                   f"{self._format(base.mean_ap, None)} / {self._format(base.min_ap, None)}"]
            for defense in self.defenses:
                cell = self.cells.get((detector, defense))
                if cell is None:
                    row.append('-')
                else:
                    row.append(f"{self._format(cell.mean_ap, cell.mean_marker)} / "
                               f"{self._format(cell.min_ap, cell.min_marker)}")
            lines.append('| ' + ' | '.join(row) + ' |')
        if self.detectors:
            times = ['-' if self.time_cost_ms.get(d) is None else f"{self.time_cost_ms[d]:.0f}"
                     for d in self.defenses]
            lines.append('| ' + ' | '.join(['Time cost (ms)', '-'] + times) + ' |')
        return '\n'.join(lines) + '\n'

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for detector in self.detectors:
            base = self.baseline.get(detector)
            if base is not None:
                rows.append({'detector': detector, 'defense': BASELINE, 'mean_ap': base.mean_ap,
                             'min_ap': base.min_ap, 'mean_marker': None, 'min_marker': None,
                             'time_cost_ms': None})
            for defense in self.defenses:
                cell = self.cells.get((detector, defense))
                if cell is None:
                    continue
                rows.append({'detector': detector, 'defense': defense, 'mean_ap': cell.mean_ap,
                             'min_ap': cell.min_ap, 'mean_marker': cell.mean_marker,
                             'min_marker': cell.min_marker, 'time_cost_ms': self.time_cost_ms.get(defense)})
        columns = ['detector', 'defense', 'mean_ap', 'min_ap', 'mean_marker', 'min_marker', 'time_cost_ms']
        return pd.DataFrame(rows, columns=columns)

    def best(self, detector: str, attr: str = 'mean_ap') -> Optional[str]:
        marker_attr = 'mean_marker' if attr == 'mean_ap' else 'min_marker'
        for defense in self.defenses:
            cell = self.cells.get((detector, defense))
            if cell is not None and getattr(cell, marker_attr) == BEST:
                return defense
        return None

