"""
Исключения набора
"""
from typing import Optional


class ToolkitError(Exception):
    """Базовая ошибка набора"""


class InvalidInputError(ToolkitError, ValueError):
    """Некорректные входные данные (форма, вырожденный бокс, размер изображения)"""


class InvalidConfigError(ToolkitError, ValueError):
    """Некорректная конфигурация (пустой диапазон, неизвестный ключ или id)"""


class PlacementError(ToolkitError):
    """Размещение патча не может быть разрешено"""


class UndefinedMetricError(ToolkitError):
    """Метрика не определена на данных (например, нет ни одного GT)"""


class AdapterError(ToolkitError):
    """Сбой внешнего адаптера детектора или защиты"""


class NonFiniteError(ToolkitError):
    """Потеря или градиент перестали быть конечными"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (шаг {step})")
        self.step = step
