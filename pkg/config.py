"""
Конфигурация набора для оценки защит от адверсариальных патчей
"""
import copy
import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from core import PERSON_CLASS
from errors import InvalidConfigError

# Загружаем переменные из .env файла
load_dotenv()

# Общие настройки
OUTPUT_DIR = os.getenv('APDE_OUTPUT_DIR', 'apde_output')  # Папка для результатов
ROOT_SEED = int(os.getenv('APDE_SEED', '0'))  # Корневой сид, из него выводятся все под-сиды
WORKERS = int(os.getenv('APDE_WORKERS', '4'))  # Размер пула потоков для поизображенческой обработки

# Холст датасета (416 x 416, pad или resize)
CANVAS_SETTINGS = {
    'side': 416,
    'mode': 'pad',       # 'pad' (letterbox) или 'resize'
    'pad_value': 0.5,
}

# Размещение патча
PLACEMENT_SETTINGS = {
    'patches_per_person': 1,     # Один патч на каждого человека
    'max_patches': None,         # Ограничение числа патчей на изображение (None = без ограничения)
}

# Диапазоны преобразований EOT (min, max)
TRANSFORM_SETTINGS = {
    'rotation_deg': (0.0, 0.0),
    'scale_ratio': (0.2, 0.2),   # Доля площади целевого бокса
    'jitter': (0.0, 0.0),        # Сдвиг центра в долях размера бокса
    'brightness': (1.0, 1.0),
}

# Оптимизация патча
ATTACK_SETTINGS = {
    'goal': 'hiding',             # 'hiding' или 'appearing'
    'loss_mode': 'max-objectness',  # 'max-objectness', 'mean-objectness', 'target-class'
    'tv_weight': 0.0,
    'tv_variant': 'anisotropic',  # 'anisotropic' или 'isotropic'
    'steps': 300,
    'learning_rate': 0.01,
    'step_rule': 'sign',          # 'sign' (FGSM-шаг) или 'gradient'
    'lr_schedule': 'constant',    # 'constant' или 'cosine'
    'eot_samples': 1,
    'init': 'gray',               # 'gray' или 'random'
    'patch_size': 32,
    'overlap_iou': 0.3,           # Кандидаты, перекрывающие GT, учитываются в потере
    'target_class': PERSON_CLASS,
    'seed': 0,
}

# Адаптивные атаки
ADAPTIVE_SETTINGS = {
    'bypass_weight': 1.0,         # mu
    'regularizer': 'tv',          # 'tv', 'entropy', 'none'
    'gradient_mode': 'exact',     # 'exact' или 'straight-through'
    'defense_draws': 1,
}

# Toy-детектор (корреляция с шаблоном)
TOY_DETECTOR_SETTINGS = {
    'template_side': 24,
    'template_grid': 3,
    'template_levels': (0.35, 0.65),  # Симметричны относительно фона 0.5
    'stride': 4,
    'temperature': 0.05,
    'center': 0.65,               # Значение корреляции, дающее уверенность 0.5
    'confidence_threshold': 0.5,
    'nms_iou': 0.5,
    'seed': 7,
}

# Защита LGS
LGS_SETTINGS = {
    'window': 8,
    'gradient_threshold': 0.2,
    'suppression': 0.9,
}

# Энтропийная защита (Jedi-подобная)
ENTROPY_SETTINGS = {
    'window': 8,
    'bins': 16,
    'entropy_threshold': 3.0,     # в битах
}

# Постобработка масок, общая для всех защит
MASK_SETTINGS = {
    'min_component_area': 16,
}

# Метрики
METRIC_SETTINGS = {
    'iou_threshold': 0.5,
    'confidence_threshold': 0.5,
    'interpolation': 'all-point',  # 'all-point' или '11-point'
    'timing_warmup': 3,
    'size_bins': (0.0, 0.05, 0.1, 0.2, 0.4, 1.0),
}

# Анализ распределений
ANALYSIS_SETTINGS = {
    'embed_side': 16,
    'embed_dim': 64,
    'embed_seed': 2024,
    'crops_per_patch': 256,
    'crop_fraction': 0.5,
    'spectrum_bins': 16,
    'shrinkage': 1e-6,
}

# Параметры прогона по умолчанию (переопределяются разделом 'run' файла конфигурации)
RUN_SETTINGS = {
    'detectors': ['toy'],
    'defenses': ['identity', 'lgs', 'entropy'],
    'attacks': ['hiding'],
    'corpus': 'toy',          # 'toy' или путь к каталогу корпуса
    'toy_images': 8,
    'include_clean': True,     # Оценка защит на чистых изображениях (attack_name='clean')
    'timing': True,            # Отдельный последовательный замер времени защит
    'log_every': 50,
}

# Форматы экспорта
EXPORT_FORMATS = {
    'jsonl': True,    # Записи EvalRecord, по одной на строку
    'csv': True,      # Таблицы метрик и лидерборд
    'markdown': True, # Лидерборд с отметками лучших
    'plots': True,    # Графики matplotlib
}

_SECTIONS = {
    'canvas': CANVAS_SETTINGS,
    'placement': PLACEMENT_SETTINGS,
    'transform': TRANSFORM_SETTINGS,
    'attack': ATTACK_SETTINGS,
    'adaptive': ADAPTIVE_SETTINGS,
    'toy_detector': TOY_DETECTOR_SETTINGS,
    'lgs': LGS_SETTINGS,
    'entropy': ENTROPY_SETTINGS,
    'mask': MASK_SETTINGS,
    'metrics': METRIC_SETTINGS,
    'analysis': ANALYSIS_SETTINGS,
    'run': RUN_SETTINGS,
}


def merged(section: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Возвращает копию раздела настроек с наложенными переопределениями

    Args:
        section: Имя раздела ('attack', 'lgs', ...)
        overrides: Значения из файла конфигурации запуска

    Raises:
        InvalidConfigError: неизвестный раздел или ключ
    """
    if section not in _SECTIONS:
        raise InvalidConfigError(f"Неизвестный раздел настроек: {section}")

    settings = copy.deepcopy(_SECTIONS[section])
    for key, value in (overrides or {}).items():
        if key not in settings:
            raise InvalidConfigError(f"Неизвестный ключ '{key}' в разделе '{section}'")
        settings[key] = value
    return settings
