"""
Командная строка набора для оценки защит от адверсариальных патчей
Запуск: python main.py <команда> [--config PATH] [--seed N] [--workers N] [--out DIR]
"""
import sys

import click

from data_exporter import DataExporter
from dataset_builder import aggregate_physical, load_physical_results
from errors import ToolkitError
from experiment_runner import (ExperimentConfig, run_adaptive, run_analysis, run_attack, run_build_dataset,
                               run_eval, run_report)
from logger_config import log_error


def check_python_version():
    """Проверяем версию Python"""
    if sys.version_info < (3, 9):
        print("❌ Нужен Python 3.9 или новее!")
        print(f"Твоя версия: {sys.version}")
        sys.exit(1)


def run_options(func):
    """Общие флаги всех команд прогона"""
    func = click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                        help='Каталог результатов')(func)
    func = click.option('--workers', type=int, default=None, help='Размер пула потоков')(func)
    func = click.option('--seed', type=int, default=None, help='Корневой сид')(func)
    func = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
                        help='JSON-конфигурация прогона (или run_log.json)')(func)
    return func


def load_config(config_path, seed, workers, out_dir) -> ExperimentConfig:
    return ExperimentConfig.from_json(config_path, seed=seed, workers=workers, out_dir=out_dir)


def fatal(error: Exception):
    """Фатальная ошибка: сообщение, запись в лог, ненулевой код выхода"""
    log_error('evaluation', error, context='cli')
    print(f"❌ Ошибка: {error}")
    sys.exit(1)


@click.group()
def cli():
    """Генерация патчей, оценка защит, адаптивные атаки и анализ"""


@cli.command()
@run_options
def attack(config_path, seed, workers, out_dir):
    """Оптимизировать патчи атак из конфигурации"""
    try:
        saved = run_attack(load_config(config_path, seed, workers, out_dir))
        print(f"✅ Сохранено патчей: {len(saved)}")
    except (ToolkitError, OSError) as e:
        fatal(e)


@cli.command('build-dataset')
@run_options
@click.option('--ratio', type=float, default=0.6, show_default=True, help='Доля обучающей части')
def build_dataset_command(config_path, seed, workers, out_dir, ratio):
    """Собрать датасет: патчи x чистые изображения, маски, манифест, разбиение"""
    try:
        run_build_dataset(load_config(config_path, seed, workers, out_dir), ratio)
    except (ToolkitError, OSError) as e:
        fatal(e)


@cli.command()
@run_options
def evaluate(config_path, seed, workers, out_dir):
    """Оценить защиты: атака -> защита -> детектор -> метрики и лидерборд"""
    try:
        cfg = load_config(config_path, seed, workers, out_dir)
        archive = run_eval(cfg)
    except (ToolkitError, OSError) as e:
        fatal(e)
        return
    for name, report in archive.reports.items():
        print(f"📊 {name}: AP50={report.ap50} ASR={report.asr} SmIoU={report.smiou} NmIoU={report.nmiou}")
    print(archive.leaderboard.to_markdown())
    DataExporter(cfg.out_dir).print_export_summary(archive.files)


@cli.command()
@run_options
def adaptive(config_path, seed, workers, out_dir):
    """Адаптивные атаки против защит из конфигурации"""
    try:
        run_adaptive(load_config(config_path, seed, workers, out_dir))
    except (ToolkitError, OSError) as e:
        fatal(e)


@cli.command()
@run_options
def analyze(config_path, seed, workers, out_dir):
    """FID-матрица и частотные спектры групп патчей"""
    try:
        run_analysis(load_config(config_path, seed, workers, out_dir))
    except (ToolkitError, OSError) as e:
        fatal(e)


@cli.command()
@click.argument('records', type=click.Path(exists=True, dir_okay=False))
@run_options
@click.option('--run-log', type=click.Path(exists=True, dir_okay=False), default=None,
              help='run_log.json со временем защит')
def report(records, config_path, seed, workers, out_dir, run_log):
    """Перестроить сводки и лидерборд из records.jsonl"""
    try:
        cfg = load_config(config_path, seed, workers, out_dir)
        run_report(records, cfg, run_log)
        print(f"✅ Лидерборд перестроен: {cfg.out_dir}")
    except (ToolkitError, OSError) as e:
        fatal(e)


@cli.command()
@click.argument('table', type=click.Path(exists=True, dir_okay=False))
@click.option('--by', type=click.Choice(['distance', 'angle', 'light']), default='distance', show_default=True)
@click.option('--out', 'out_file', type=click.Path(dir_okay=False), default=None, help='CSV с агрегатами')
def physical(table, by, out_file):
    """Агрегировать результаты физических испытаний"""
    try:
        frame = aggregate_physical(load_physical_results(table), by)
    except (ToolkitError, OSError) as e:
        fatal(e)
        return
    if out_file:
        frame.to_csv(out_file, index=False, encoding='utf-8')
        print(f"✅ CSV файл сохранен: {out_file}")
    print(frame.to_string(index=False))


if __name__ == "__main__":
    check_python_version()
    cli()
