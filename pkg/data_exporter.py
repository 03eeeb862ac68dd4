"""
Экспорт результатов в различные форматы для анализа
"""
import os
from typing import Any, Dict, List, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

import config  # noqa: E402
from analysis import DistributionReport  # noqa: E402
from attack_engine import OptimizationTrace  # noqa: E402
from json_utils import write_json, write_jsonl  # noqa: E402
from leaderboard import Leaderboard  # noqa: E402
from metrics import EvalRecord, MetricReport  # noqa: E402


class DataExporter:
    """
    Класс для экспорта записей оценки, сводок, лидербордов и графиков
    """

    def __init__(self, out_dir: Optional[str] = None, formats: Optional[Dict[str, bool]] = None):
        """Инициализация экспортера"""
        self.out_dir = out_dir or config.OUTPUT_DIR
        self.formats = dict(config.EXPORT_FORMATS, **(formats or {}))
        if not os.path.exists(self.out_dir):
            os.makedirs(self.out_dir)
            print(f"📁 Создана папка {self.out_dir}")

    def _path(self, filename: str) -> str:
        return os.path.join(self.out_dir, filename)

    def export_records(self, records: Sequence[EvalRecord], filename: str = 'records.jsonl') -> str:
        """
        Записи EvalRecord в JSON Lines (по одной на строку)
        """
        filepath = self._path(filename)
        count = write_jsonl(filepath, (r.to_dict() for r in records))
        if self.formats.get('csv'):
            records_frame(records).to_csv(os.path.splitext(filepath)[0] + '.csv', index=False, encoding='utf-8')
        print(f"💾 Записи сохранены: {filepath} ({count} строк)")
        return filepath

    def export_report(self, report: MetricReport, name: str = 'metrics') -> Dict[str, str]:
        """
        Сводка метрик: JSON целиком и CSV с разбивкой по детекторам и атакам
        """
        name = _slug(name)
        files = {'json': write_json(self._path(f"{name}.json"), report.to_dict())}
        if self.formats.get('csv'):
            rows = [dict(scope='overall', name='all', **{k: v for k, v in report.to_dict().items()
                                                          if k not in ('per_detector', 'per_attack')})]
            for scope, groups in (('detector', report.per_detector), ('attack', report.per_attack)):
                for group_name, values in groups.items():
                    rows.append(dict(scope=scope, name=group_name, **values))
            filepath = self._path(f"{name}.csv")
            pd.DataFrame(rows).to_csv(filepath, index=False, encoding='utf-8')
            files['csv'] = filepath
        print(f"📊 Сводка метрик сохранена: {files['json']}")
        return files

    def export_table(self, rows: Sequence[Dict[str, Any]], filename: str) -> str:
        filepath = self._path(filename)
        pd.DataFrame(list(rows)).to_csv(filepath, index=False, encoding='utf-8')
        return filepath

    def export_trace(self, trace: OptimizationTrace, filename: str = 'trace.jsonl') -> str:
        filepath = self._path(filename)
        write_jsonl(filepath, trace.to_rows())
        return filepath

    def export_leaderboard(self, board: Leaderboard, name: str = 'leaderboard') -> Dict[str, str]:
        """
        Лидерборд в Markdown (с отметками) и CSV
        """
        files = {}
        if self.formats.get('markdown'):
            filepath = self._path(f"{name}.md")
            with open(filepath, 'w', encoding='utf-8') as f:
                f.write(board.to_markdown())
            files['markdown'] = filepath
        if self.formats.get('csv'):
            filepath = self._path(f"{name}.csv")
            board.to_frame().to_csv(filepath, index=False, encoding='utf-8')
            files['csv'] = filepath
        print(f"🏆 Лидерборд сохранен: {', '.join(files.values()) or 'форматы отключены'}")
        return files

    def plot_comparison(self, reports: Dict[str, MetricReport], filename: str = 'comparison.png') -> Optional[str]:
        """Столбцы ASR, SmIoU и NmIoU по защитам"""
        if not self.formats.get('plots') or not reports:
            return None
        names = list(reports)
        metrics = ('asr', 'smiou', 'nmiou')
        width = 0.8 / len(metrics)
        positions = np.arange(len(names))

        fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
        for i, metric in enumerate(metrics):
            values = [getattr(reports[n], metric) for n in names]
            ax.bar(positions + i * width, [np.nan if v is None else v for v in values], width, label=metric.upper())
        ax.set_xticks(positions + width * (len(metrics) - 1) / 2)
        ax.set_xticklabels(names, rotation=30, ha='right')
        ax.set_ylim(0, 1)
        ax.legend()
        ax.set_title('ASR / mIoU')
        return self._save(fig, filename)

    def plot_size_sweep(self, rows: Sequence[Dict[str, Any]], filename: str = 'size_sweep.png',
                        title: str = '') -> Optional[str]:
        """SmIoU, NmIoU и AP в зависимости от относительной площади патча"""
        if not self.formats.get('plots') or not rows:
            return None
        centers = [(r['bin_lo'] + r['bin_hi']) / 2 for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ('smiou', 'nmiou', 'ap50'):
            ax.plot(centers, [np.nan if r.get(key) is None else r[key] for r in rows], marker='o', label=key)
        ax.set_xlabel('patch area / image area')
        ax.set_ylim(0, 1)
        ax.legend()
        ax.set_title(title or 'size sweep')
        return self._save(fig, filename)

    def plot_spectra(self, report: DistributionReport, filename: str = 'spectra.png') -> Optional[str]:
        if not self.formats.get('plots'):
            return None
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, spectrum in report.mean_spectra.items():
            ax.plot(spectrum.bin_centers, spectrum.energy_fraction, marker='.', label=label)
        ax.set_yscale('log')
        ax.set_xlabel('radial frequency (cycles / pixel)')
        ax.set_ylabel('energy fraction')
        ax.legend()
        return self._save(fig, filename)

    def plot_fid_heatmap(self, report: DistributionReport, filename: str = 'fid.png') -> Optional[str]:
        if not self.formats.get('plots'):
            return None
        size = len(report.labels)
        fig, ax = plt.subplots(figsize=(max(5, 0.5 * size), max(4, 0.45 * size)))
        image = ax.imshow(report.fid_matrix, cmap='viridis')
        ax.set_xticks(range(size))
        ax.set_yticks(range(size))
        ax.set_xticklabels(report.labels, rotation=90)
        ax.set_yticklabels(report.labels)
        fig.colorbar(image, ax=ax, label='FID')
        return self._save(fig, filename)

    def _save(self, fig, filename: str) -> str:
        filepath = self._path(filename)
        fig.tight_layout()
        fig.savefig(filepath, dpi=120)
        plt.close(fig)
        print(f"📈 График сохранен: {filepath}")
        return filepath

    def export_evaluation(self, records: Sequence[EvalRecord], reports: Dict[str, MetricReport],
                          board: Leaderboard, sweep: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
        """
        Полный набор файлов оценки
        """
        exported: Dict[str, Any] = {}
        if self.formats.get('jsonl'):
            exported['records'] = self.export_records(records)
        exported['reports'] = {name: self.export_report(report, f"metrics_{name}")
                               for name, report in reports.items()}
        exported['leaderboard'] = self.export_leaderboard(board)
        if sweep:
            exported['size_sweep'] = self.export_table(sweep, 'size_sweep.csv')
        exported['plots'] = [p for p in (self.plot_comparison(reports), self.plot_size_sweep(sweep)) if p]
        return exported

    def print_export_summary(self, exported: Dict[str, Any]):
        """Выводит список созданных файлов"""
        print("\n📦 Экспортированные файлы:")
        for kind, value in exported.items():
            print(f"   {kind}: {value}")


def _slug(name: str) -> str:
    return ''.join(c if c.isalnum() or c in '-_' else '_' for c in name)


def records_frame(records: Sequence[EvalRecord]) -> pd.DataFrame:
    """Плоская таблица записей (без боксов)"""
    columns = ['image_id', 'attack_name', 'defense_name', 'detector_name', 'defense_ms',
               'patch_fraction', 'failed', 'error', 'detections', 'persons']
    rows: List[Dict[str, Any]] = []
    for r in records:
        rows.append({
            'image_id': r.image_id,
            'attack_name': r.attack_name,
            'defense_name': r.defense_name,
            'detector_name': r.detector_name,
            'defense_ms': r.defense_ms,
            'patch_fraction': r.patch_fraction,
            'failed': r.failed,
            'error': r.error,
            'detections': len(r.detections.boxes),
            'persons': len(r.gt.persons()),
        })
    return pd.DataFrame(rows, columns=columns)
