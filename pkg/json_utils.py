"""
Утилиты для работы с JSON и сериализацией данных
"""
import dataclasses
import json
from datetime import datetime, date
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


class ToolkitEncoder(json.JSONEncoder):
    """JSON энкодер с поддержкой datetime, numpy и dataclass объектов"""

    def default(self, obj):
        if isinstance(obj, (datetime, date)):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return str(obj)
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return dataclasses.asdict(obj)
        return super().default(obj)


def safe_json_dumps(data: Any, **kwargs) -> str:
    """
    Безопасная сериализация в JSON

    Args:
        data: Данные для сериализации
        **kwargs: Дополнительные параметры для json.dumps

    Returns:
        str: JSON строка
    """
    return json.dumps(data, cls=ToolkitEncoder, ensure_ascii=False, **kwargs)


def safe_json_loads(data: str) -> Any:
    """Десериализация из JSON"""
    return json.loads(data)


def write_json(path, data: Any) -> str:
    """Записывает JSON-файл (ключи отсортированы, чтобы пересборка была побайтно одинаковой)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(safe_json_dumps(data, indent=2, sort_keys=True), encoding='utf-8')
    return str(path)


def read_json(path) -> Any:
    return safe_json_loads(Path(path).read_text(encoding='utf-8'))


def write_jsonl(path, rows: Iterable[Any]) -> int:
    """Пишет строки JSON Lines, возвращает число записей"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(safe_json_dumps(row, sort_keys=True))
            f.write('\n')
            count += 1
    return count


def read_jsonl(path) -> Iterator[Any]:
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line:
                yield safe_json_loads(line)
