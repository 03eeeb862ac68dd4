"""
Оркестрация экспериментов: оценка защит, оптимизация патчей, адаптивные атаки,
анализ распределений и сборка датасета по одному файлу конфигурации
"""
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

import config
from adaptive import AdaptiveConfig, run_adaptive_attack
from analysis import RandomProjectionEmbedder, distribution_report, random_crops
from applier import Patch, TransformSpec
from attack_engine import AttackConfig, attacked_corpus, optimize_patch
from core import BinaryMask, DetectionSet, GroundTruthSet, ImageBuffer, derive_seed
from data_exporter import DataExporter
from dataset_builder import CanvasPolicy, build_dataset, load_corpus
from defense_zoo import Defense, IdentityDefense, build_defense
from detector_gateway import Detector, ToyDetector, build_detector, make_toy_corpus
from errors import InvalidConfigError, ToolkitError, UndefinedMetricError
from image_io import load_patch, save_patch
from json_utils import read_json, read_jsonl, write_json
from leaderboard import BASELINE, CLEAN_ATTACK, Leaderboard
from logger_config import log_error, log_info, log_warning
from metrics import EvalRecord, MetricReport, defense_gain, size_sweep, summarize, time_cost

PACKAGES = ('numpy', 'scipy', 'torch', 'pandas', 'matplotlib', 'Pillow', 'click', 'python-dotenv')
DEFENSE_SECTIONS = {'lgs': 'lgs', 'lgs-erase': 'lgs', 'entropy': 'entropy', 'entropy-erase': 'entropy'}
OPTIMIZED_GOALS = ('hiding', 'appearing')

Corpus = List[Tuple[ImageBuffer, GroundTruthSet]]


@dataclass
class AttackEntry:
    """Одна атака прогона: оптимизируемый патч, патч из файла или случайный патч"""
    name: str
    kind: str
    goal: str = 'hiding'
    path: Optional[str] = None
    settings: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def parse(cls, spec: Any) -> "AttackEntry":
        if isinstance(spec, str):
            if spec in OPTIMIZED_GOALS:
                return cls(spec, 'optimize', goal=spec)
            if spec == 'random':
                return cls('random', 'random')
            if spec.endswith('.png'):
                return cls(Path(spec).stem, 'file', path=spec)
            raise InvalidConfigError(f"Неизвестная атака: {spec}")
        if not isinstance(spec, dict) or 'id' not in spec:
            raise InvalidConfigError(f"Неверное описание атаки: {spec}")
        kind = spec['id']
        if kind in OPTIMIZED_GOALS:
            return cls(spec.get('name', kind), 'optimize', goal=kind, settings=dict(spec.get('settings', {})))
        if kind == 'file':
            if 'path' not in spec:
                raise InvalidConfigError(f"Для атаки из файла нужен path: {spec}")
            return cls(spec.get('name', Path(spec['path']).stem), 'file', goal=spec.get('goal', 'hiding'),
                       path=spec['path'])
        if kind == 'random':
            return cls(spec.get('name', 'random'), 'random', settings=dict(spec.get('settings', {})))
        raise InvalidConfigError(f"Неизвестная атака: {kind}")


@dataclass
class ExperimentConfig:
    """
    Конфигурация прогона

    settings - переопределения разделов config.py ('attack', 'lgs', 'metrics', ...);
    analysis - входы анализа распределений: {'nap': [...], 'non_nap': [...]}.
    """
    detectors: List[Any] = field(default_factory=lambda: list(config.RUN_SETTINGS['detectors']))
    defenses: List[Any] = field(default_factory=lambda: list(config.RUN_SETTINGS['defenses']))
    attacks: List[Any] = field(default_factory=lambda: list(config.RUN_SETTINGS['attacks']))
    corpus: str = config.RUN_SETTINGS['corpus']
    toy_images: int = config.RUN_SETTINGS['toy_images']
    include_clean: bool = config.RUN_SETTINGS['include_clean']
    timing: bool = config.RUN_SETTINGS['timing']
    log_every: int = config.RUN_SETTINGS['log_every']
    seed: int = config.ROOT_SEED
    workers: int = config.WORKERS
    out_dir: str = config.OUTPUT_DIR
    settings: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    analysis: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        for section, overrides in self.settings.items():
            config.merged(section, overrides)
        if self.workers < 1:
            raise InvalidConfigError("workers должен быть >= 1")
        if self.toy_images < 1:
            raise InvalidConfigError("toy_images должен быть >= 1")
        for spec in self.attacks:
            AttackEntry.parse(spec)
        return self

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.settings.get(name, {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(row) - known)
        if unknown:
            raise InvalidConfigError(f"Неизвестные ключи конфигурации: {unknown}")
        return cls(**row).validate()

    @classmethod
    def from_json(cls, path: Optional[str] = None, **overrides) -> "ExperimentConfig":
        """
        Читает конфигурацию из JSON; архив прогона (run_log.json) тоже принимается

        Значения overrides, отличные от None (флаги CLI), накладываются поверх файла.
        """
        row: Dict[str, Any] = {}
        if path:
            row = read_json(path)
            if 'config' in row and 'versions' in row:
                row = row['config']
        row.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(row)


@dataclass
class ResolvedExperiment:
    detectors: List[Detector]
    defenses: List[Defense]
    attacks: List[AttackEntry]
    corpus: Corpus
    seeds: Dict[str, int] = field(default_factory=dict)


def load_experiment_corpus(cfg: ExperimentConfig, detectors: Sequence[Detector] = ()) -> Corpus:
    if cfg.corpus == 'toy':
        toy = next((d for d in detectors if isinstance(d, ToyDetector)), None)
        toy = toy or ToyDetector.from_settings(cfg.section('toy_detector'))
        return make_toy_corpus(toy, cfg.toy_images, seed=derive_seed(cfg.seed, 'corpus'))
    return load_corpus(cfg.corpus)


def resolve(cfg: ExperimentConfig) -> ResolvedExperiment:
    """
    Разрешает все идентификаторы до начала прогона

    Raises:
        InvalidConfigError: неизвестный детектор, защита или атака; атака без градиентов
        FileNotFoundError: отсутствует файл патча или корпус
    """
    cfg.validate()
    detectors = [build_detector(spec, cfg.section('toy_detector')) for spec in cfg.detectors]
    defenses = []
    for spec in cfg.defenses:
        kind = spec if isinstance(spec, str) else spec.get('id') if isinstance(spec, dict) else None
        defenses.append(build_defense(spec, cfg.section(DEFENSE_SECTIONS.get(kind, '')) or None))
    names = [d.name for d in defenses]
    if len(set(names)) != len(names) or BASELINE in names:
        raise InvalidConfigError(f"Имена защит должны быть уникальны и отличаться от '{BASELINE}': {names}")

    attacks = [AttackEntry.parse(spec) for spec in cfg.attacks]
    for entry in attacks:
        if entry.kind == 'file' and not Path(entry.path).exists():
            raise FileNotFoundError(f"Файл патча не найден: {entry.path}")
        if entry.kind == 'optimize':
            blind = [d.name for d in detectors if not d.supports_gradients]
            if blind:
                raise InvalidConfigError(f"Атака '{entry.name}' требует градиентов, их нет у: {blind}")
            AttackConfig.from_settings(_attack_overrides(cfg, entry))

    corpus = load_experiment_corpus(cfg, detectors)
    seeds = {'root': cfg.seed, 'corpus': derive_seed(cfg.seed, 'corpus')}
    for entry in attacks:
        seeds[f"attack:{entry.name}"] = derive_seed(cfg.seed, f"attack:{entry.name}")
        seeds[f"apply:{entry.name}"] = derive_seed(cfg.seed, f"apply:{entry.name}")
    return ResolvedExperiment(detectors, defenses, attacks, corpus, seeds)


def _attack_overrides(cfg: ExperimentConfig, entry: AttackEntry) -> Dict[str, Any]:
    overrides = cfg.section('attack')
    overrides.update(entry.settings)
    overrides['goal'] = entry.goal
    overrides['seed'] = derive_seed(cfg.seed, f"attack:{entry.name}")
    return overrides


def _transform_spec(cfg: ExperimentConfig) -> TransformSpec:
    return TransformSpec.from_settings(config.merged('transform', cfg.section('transform')),
                                       derive_seed(cfg.seed, 'transform'))


def package_versions() -> Dict[str, Optional[str]]:
    versions: Dict[str, Optional[str]] = {'python': platform.python_version()}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_run_log(cfg: ExperimentConfig, command: str, seeds: Dict[str, int], started: datetime,
                  extra: Optional[Dict[str, Any]] = None, filename: str = 'run_log.json') -> str:
    """Архив прогона: конфигурация, сиды, версии пакетов, время"""
    log = {
        'command': command,
        'config': cfg.to_dict(),
        'seeds': seeds,
        'versions': package_versions(),
        'started': started.isoformat(),
        'finished': datetime.now().isoformat(),
    }
    log.update(extra or {})
    return write_json(Path(cfg.out_dir) / filename, log)


def attack_patch(cfg: ExperimentConfig, entry: AttackEntry, detector: Detector, corpus: Corpus,
                 exporter: Optional[DataExporter] = None) -> Patch:
    """Патч атаки для детектора: из файла, случайный или оптимизированный (white-box)"""
    if entry.kind == 'file':
        patch = load_patch(entry.path)
        patch.meta.setdefault('goal', entry.goal)
        return patch
    attack_cfg = AttackConfig.from_settings(_attack_overrides(cfg, entry))
    if entry.kind == 'random':
        rng = np.random.default_rng(attack_cfg.seed)
        return Patch.uniform_random(attack_cfg.patch_size, rng,
                                    {'attack_name': entry.name, 'goal': 'hiding', 'patch_id': entry.name})
    patch, trace = optimize_patch(corpus, detector, attack_cfg, transform_spec=_transform_spec(cfg),
                                  placement_settings=cfg.section('placement'), log_every=cfg.log_every)
    patch.meta.update({'attack_name': entry.name, 'patch_id': f"{entry.name}-{detector.name}"})
    if exporter is not None:
        exporter.export_trace(trace, f"trace_{entry.name}_{detector.name}.jsonl")
    return patch


def _evaluate_image(item: Tuple[ImageBuffer, GroundTruthSet, BinaryMask], attack_name: str,
                    defense: Optional[Defense], detector: Detector) -> EvalRecord:
    """Защита -> детектор для одного изображения; сбой адаптера дает запись с failed=True"""
    image, gt, mask = item
    defense_name = defense.name if defense is not None else BASELINE
    fraction = None if attack_name == CLEAN_ATTACK else mask.area / float(image.height * image.width)
    try:
        pred_mask, defense_ms = None, 0.0
        defended = image
        if defense is not None:
            start = time.perf_counter()
            defended, pred_mask = defense.defend(image)
            defense_ms = (time.perf_counter() - start) * 1000.0
        return EvalRecord(image.id, attack_name, defense_name, detector.name, detector.detect(defended), gt,
                          pred_mask=pred_mask, gt_mask=mask if pred_mask is not None else None,
                          defense_ms=defense_ms, patch_fraction=fraction)
    except ToolkitError as e:
        log_error('evaluation', e, context=f"image={image.id} attack={attack_name} "
                                           f"defense={defense_name} detector={detector.name}")
        return EvalRecord(image.id, attack_name, defense_name, detector.name, DetectionSet(image.id), gt,
                          patch_fraction=fraction, failed=True, error=str(e))


def evaluate_pass(items: Sequence[Tuple[ImageBuffer, GroundTruthSet, BinaryMask]], attack_name: str,
                  defense: Optional[Defense], detector: Detector, workers: int = 1) -> List[EvalRecord]:
    """
    Один проход (атака, защита, детектор) по корпусу

    Параллельно только для потокобезопасных детектора и детерминированной защиты;
    порядок записей совпадает с порядком изображений.
    """
    parallel = detector.thread_safe and (defense is None or (defense.thread_safe and not defense.stochastic))
    if not parallel or workers <= 1:
        return [_evaluate_image(item, attack_name, defense, detector) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda item: _evaluate_image(item, attack_name, defense, detector), items))


def render_leaderboard(board: Leaderboard, out_dir: str, reports: Optional[Dict[str, MetricReport]] = None,
                       sweep: Optional[Sequence[Dict[str, Any]]] = None) -> Dict[str, Any]:
    """Таблицы лидерборда и графики сравнения"""
    exporter = DataExporter(out_dir)
    files: Dict[str, Any] = {'leaderboard': exporter.export_leaderboard(board)}
    plots = [exporter.plot_comparison(reports or {}), exporter.plot_size_sweep(sweep or [])]
    files['plots'] = [p for p in plots if p]
    return files


@dataclass
class EvalArchive:
    records: List[EvalRecord]
    reports: Dict[str, MetricReport]
    clean_reports: Dict[str, MetricReport]
    leaderboard: Leaderboard
    size_sweep: List[Dict[str, Any]]
    time_cost_ms: Dict[str, float]
    failures: List[Dict[str, Any]]
    files: Dict[str, Any] = field(default_factory=dict)
    gains: Dict[str, Optional[float]] = field(default_factory=dict)


def group_reports(records: Sequence[EvalRecord], settings: Optional[Dict[str, Any]] = None,
                  workers: int = 1) -> Tuple[Dict[str, MetricReport], Dict[str, MetricReport]]:
    """Сводки по защитам: отдельно для атакованных и для чистых изображений"""
    attacked: Dict[str, List[EvalRecord]] = {}
    clean: Dict[str, List[EvalRecord]] = {}
    for record in records:
        target = clean if record.attack_name == CLEAN_ATTACK else attacked
        target.setdefault(record.defense_name, []).append(record)
    groups = [(attacked, name, group) for name, group in attacked.items()]
    groups += [(clean, name, group) for name, group in clean.items()]
    if workers <= 1 or len(groups) <= 1:
        summaries = [summarize(group, settings) for _, _, group in groups]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(lambda item: summarize(item[2], settings), groups))
    reports: Dict[str, MetricReport] = {}
    clean_reports: Dict[str, MetricReport] = {}
    for (target, name, _), summary in zip(groups, summaries):
        (clean_reports if target is clean else reports)[name] = summary
    return reports, clean_reports


def defense_gains(records: Sequence[EvalRecord]) -> Dict[str, Optional[float]]:
    """AP с защитой минус AP без защиты на атакованных изображениях, по каждой защите"""
    attacked: Dict[str, List[EvalRecord]] = {}
    for record in records:
        if record.attack_name != CLEAN_ATTACK:
            attacked.setdefault(record.defense_name, []).append(record)
    undefended = attacked.pop(BASELINE, [])
    gains: Dict[str, Optional[float]] = {}
    for name, group in attacked.items():
        try:
            gains[name] = defense_gain(group, undefended)
        except UndefinedMetricError:
            gains[name] = None
    return gains


def run_eval(cfg: ExperimentConfig) -> EvalArchive:
    """
    Полный прогон оценки: (атака, защита, детектор, изображение) -> EvalRecord

    Колонка без защиты присутствует всегда; время защит замеряется отдельно и последовательно.
    """
    started = datetime.now()
    resolved = resolve(cfg)
    exporter = DataExporter(cfg.out_dir)
    spec = _transform_spec(cfg)
    corpus = resolved.corpus
    log_info('evaluation', f"Оценка: {len(resolved.detectors)} детекторов, {len(resolved.defenses)} защит, "
                           f"{len(resolved.attacks)} атак, {len(corpus)} изображений")

    records: List[EvalRecord] = []
    for detector in resolved.detectors:
        passes = []
        if cfg.include_clean:
            passes.append((CLEAN_ATTACK, [(image, gt, BinaryMask.empty_like(image)) for image, gt in corpus]))
        for entry in resolved.attacks:
            patch = attack_patch(cfg, entry, detector, corpus, exporter)
            items = attacked_corpus(corpus, patch, spec, patch.meta.get('goal', entry.goal),
                                    cfg.section('placement'), seed=resolved.seeds[f"apply:{entry.name}"])
            passes.append((entry.name, items))

        for attack_name, items in passes:
            print(f"🎯 {detector.name}: атака {attack_name}")
            records.extend(evaluate_pass(items, attack_name, None, detector, cfg.workers))
            for defense in resolved.defenses:
                defense.reseed(derive_seed(cfg.seed, f"defense:{defense.name}:{attack_name}"))
                records.extend(evaluate_pass(items, attack_name, defense, detector, cfg.workers))

    timings: Dict[str, float] = {}
    if cfg.timing:
        images = [image for image, _ in corpus]
        for defense in resolved.defenses:
            timings[defense.name] = time_cost(defense, images).mean_ms

    metric_settings = cfg.section('metrics') or None
    reports, clean_reports = group_reports(records, metric_settings)
    bins = config.merged('metrics', metric_settings)['size_bins']
    sweep = size_sweep([r for r in records if r.defense_name != BASELINE and r.attack_name != CLEAN_ATTACK], bins)
    board = Leaderboard.from_records(records, timings)
    gains = defense_gains(records)
    failures = [{'image_id': r.image_id, 'attack': r.attack_name, 'defense': r.defense_name,
                 'detector': r.detector_name, 'error': r.error} for r in records if r.failed]
    if failures:
        log_warning('evaluation', f"Сбойных записей: {len(failures)}")
        print(f"⚠️ Сбойных записей: {len(failures)} (см. run_log.json)")

    files = exporter.export_evaluation(records, reports, board, sweep)
    if clean_reports:
        files['clean_reports'] = {name: exporter.export_report(report, f"clean_{name}")
                                  for name, report in clean_reports.items()}
    files['run_log'] = write_run_log(cfg, 'evaluate', resolved.seeds, started, {
        'failures': failures,
        'time_cost_ms': timings,
        'defense_gain': gains,
        'reports': {name: report.to_dict() for name, report in reports.items()},
    })
    return EvalArchive(records, reports, clean_reports, board, sweep, timings, failures, files, gains)


def run_attack(cfg: ExperimentConfig) -> Dict[str, str]:
    """Оптимизирует (или создает) патчи всех атак для всех детекторов и сохраняет их"""
    started = datetime.now()
    resolved = resolve(cfg)
    exporter = DataExporter(cfg.out_dir)
    saved = {}
    for detector in resolved.detectors:
        for entry in resolved.attacks:
            if entry.kind == 'file':
                continue
            patch = attack_patch(cfg, entry, detector, resolved.corpus, exporter)
            patch_id = patch.meta.get('patch_id', f"{entry.name}-{detector.name}")
            saved[patch_id] = save_patch(patch, Path(cfg.out_dir) / 'patches' / f"{patch_id}.png")
            print(f"✅ Патч {patch_id} сохранен: {saved[patch_id]}")
    write_run_log(cfg, 'attack', resolved.seeds, started, {'patches': saved})
    return saved


def run_adaptive(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    """Адаптивная атака против каждой защиты (кроме identity) на каждом детекторе"""
    started = datetime.now()
    resolved = resolve(cfg)
    exporter = DataExporter(cfg.out_dir)
    spec = _transform_spec(cfg)
    adaptive_cfg = AdaptiveConfig.from_settings(cfg.section('attack'), cfg.section('adaptive'))
    targets = [d for d in resolved.defenses if not isinstance(d, IdentityDefense)]
    if adaptive_cfg.gradient_mode == 'exact':
        blocked = [d.name for d in targets if not d.differentiable]
        if blocked:
            raise InvalidConfigError(f"Точный градиент недоступен для защит {blocked}; "
                                     f"используйте gradient_mode='straight-through'")

    results = []
    for detector in resolved.detectors:
        adaptive_cfg.base.seed = derive_seed(cfg.seed, f"adaptive:{detector.name}")
        baseline, _ = optimize_patch(resolved.corpus, detector, adaptive_cfg.base, transform_spec=spec,
                                     log_every=cfg.log_every)
        for defense in targets:
            patch, trace, report = run_adaptive_attack(resolved.corpus, detector, defense, adaptive_cfg,
                                                       transform_spec=spec, baseline_patch=baseline,
                                                       log_every=cfg.log_every)
            patch_id = f"adaptive-{defense.name}-{detector.name}"
            patch.meta['patch_id'] = patch_id
            report['patch'] = save_patch(patch, Path(cfg.out_dir) / 'patches' / f"{patch_id}.png")
            exporter.export_trace(trace, f"trace_{patch_id}.jsonl")
            results.append(report)
            print(f"🛡️ {defense.name}/{detector.name}: ASR {report['baseline_asr']} -> {report['adaptive_asr']}")

    exporter.export_table(results, 'adaptive.csv')
    write_json(Path(cfg.out_dir) / 'adaptive.json', results)
    seeds = dict(resolved.seeds, **{f"adaptive:{d.name}": derive_seed(cfg.seed, f"adaptive:{d.name}")
                                    for d in resolved.detectors})
    write_run_log(cfg, 'adaptive', seeds, started, {'adaptive': results})
    return results


def synthetic_patch_groups(count: int, side: int, seed: int) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    Демонстрационные группы: гладкие "натуралистичные" патчи и шумовые патчи
    """
    rng = np.random.default_rng(derive_seed(seed, 'synthetic-groups'))
    smooth = []
    for _ in range(count):
        noise = rng.uniform(0.0, 1.0, size=(side, side, 3))
        blurred = ndimage.gaussian_filter(noise, sigma=(side / 8.0, side / 8.0, 0))
        span = blurred.max() - blurred.min()
        smooth.append((blurred - blurred.min()) / span if span > 0 else blurred)
    noisy = [rng.uniform(0.0, 1.0, size=(side, side, 3)) for _ in range(count)]
    return smooth, noisy


def run_analysis(cfg: ExperimentConfig):
    """
    FID-матрица и частотные спектры групп патчей

    Входы: cfg.analysis = {'nap': [файлы], 'non_nap': [файлы], 'clean_crops': int};
    без входов используются синтетические группы.
    """
    started = datetime.now()
    settings = config.merged('analysis', cfg.section('analysis'))
    nap_files, non_nap_files = cfg.analysis.get('nap', []), cfg.analysis.get('non_nap', [])
    if nap_files or non_nap_files:
        nap = [load_patch(p) for p in nap_files]
        non_nap = [load_patch(p) for p in non_nap_files]
    else:
        log_warning('analysis', "Файлы патчей не заданы: анализ синтетических групп")
        nap, non_nap = synthetic_patch_groups(int(cfg.analysis.get('synthetic_count', 4)), 32, cfg.seed)

    clean = []
    n_clean = int(cfg.analysis.get('clean_crops', 0))
    if n_clean:
        corpus = load_experiment_corpus(cfg)
        rng = np.random.default_rng(derive_seed(cfg.seed, 'clean-crops'))
        for image, _ in corpus:
            clean.extend(random_crops(image.pixels, n_clean, settings['crop_fraction'], rng))

    embedder = RandomProjectionEmbedder(settings['embed_side'], settings['embed_dim'], settings['embed_seed'])
    report = distribution_report(nap, non_nap, clean, embedder, settings['crops_per_patch'],
                                 settings['spectrum_bins'], derive_seed(cfg.seed, 'analysis'), cfg.workers)
    exporter = DataExporter(cfg.out_dir)
    files = {'report': write_json(Path(cfg.out_dir) / 'analysis.json', report.to_dict()),
             'plots': [p for p in (exporter.plot_spectra(report), exporter.plot_fid_heatmap(report)) if p]}
    write_run_log(cfg, 'analyze', {'root': cfg.seed, 'analysis': derive_seed(cfg.seed, 'analysis')}, started,
                  {'pattern_holds': report.pattern_holds, 'embedder': report.embedder_name})
    print(f"🔬 FID внутри non-NAP {report.within_non_nap:.4f}, между группами {report.cross_nap_non_nap:.4f}")
    return report, files


def run_build_dataset(cfg: ExperimentConfig, split_ratio: float = 0.6):
    """Датасет из патчей атак прогона (файлы или оптимизированные на первом детекторе)"""
    started = datetime.now()
    resolved = resolve(cfg)
    detector = resolved.detectors[0]
    patches = []
    for entry in resolved.attacks:
        patch = attack_patch(cfg, entry, detector, resolved.corpus)
        patch.meta['patch_id'] = entry.name
        patches.append(patch)
    policy = CanvasPolicy.from_settings(cfg.section('canvas'))
    root = Path(cfg.out_dir) / 'dataset'
    manifest = build_dataset(patches, resolved.corpus, policy, cfg.seed, root, _transform_spec(cfg),
                             cfg.section('placement'), split_ratio, cfg.workers)
    write_run_log(cfg, 'build-dataset', dict(resolved.seeds, split=derive_seed(cfg.seed, 'split')), started,
                  {'counts': manifest.counts})
    print(f"🗂️ Датасет: {manifest.counts}")
    return manifest


def load_records(path) -> List[EvalRecord]:
    return [EvalRecord.from_dict(row) for row in read_jsonl(path)]


def run_report(records_path: str, cfg: ExperimentConfig, run_log: Optional[str] = None) -> Dict[str, Any]:
    """
    Перестраивает сводки и лидерборд из сохраненных записей

    Раздел metrics конфигурации задает пороги и корзины размеров; архив пишется в report_log.json.
    """
    started = datetime.now()
    records = load_records(records_path)
    timings = {}
    log_path = run_log or os.path.join(os.path.dirname(records_path), 'run_log.json')
    if os.path.exists(log_path):
        timings = read_json(log_path).get('time_cost_ms', {}) or {}
    metric_settings = cfg.section('metrics') or None
    reports, _ = group_reports(records, metric_settings, cfg.workers)
    bins = config.merged('metrics', metric_settings)['size_bins']
    sweep = size_sweep([r for r in records if r.defense_name != BASELINE and r.attack_name != CLEAN_ATTACK], bins)
    board = Leaderboard.from_records(records, timings)
    files = render_leaderboard(board, cfg.out_dir, reports, sweep)
    exporter = DataExporter(cfg.out_dir)
    files['reports'] = {name: exporter.export_report(report, f"metrics_{name}") for name, report in reports.items()}
    files['run_log'] = write_run_log(cfg, 'report', {'root': cfg.seed}, started,
                                     {'records': str(records_path), 'time_cost_ms': timings},
                                     filename='report_log.json')
    return files
