"""
Общие фикстуры: toy-детектор, синтетический корпус, изолированные каталоги логов
"""
import os
import sys
import tempfile

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
os.environ.setdefault('APDE_LOGS_DIR', os.path.join(tempfile.gettempdir(), 'apde_test_logs'))

from detector_gateway import ToyDetector, make_toy_corpus  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: долгие сквозные прогоны оптимизации')


@pytest.fixture(scope='session')
def toy_detector():
    return ToyDetector.from_settings()


@pytest.fixture(scope='session')
def toy_corpus(toy_detector):
    return make_toy_corpus(toy_detector, 4, seed=11)


@pytest.fixture
def small_corpus(toy_detector):
    return make_toy_corpus(toy_detector, 2, seed=3)
