"""
Конфигурация логирования
"""
import logging
import os
from logging.handlers import RotatingFileHandler

LOGS_DIR = os.getenv('APDE_LOGS_DIR', 'logs')
LOG_LEVEL = getattr(logging, os.getenv('APDE_LOG_LEVEL', 'INFO').upper(), logging.INFO)

_loggers = {}


def setup_logger(name, log_file, level=None):
    """Настройка логгера с ротацией файлов"""
    logger = logging.getLogger(f"apde.{name}")
    if logger.handlers:
        return logger

    # Создаем директорию для логов если её нет
    os.makedirs(LOGS_DIR, exist_ok=True)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    # Ротация: максимум 10MB на файл, хранить 5 файлов
    file_handler = RotatingFileHandler(
        os.path.join(LOGS_DIR, log_file),
        maxBytes=10*1024*1024,
        backupCount=5,
        encoding='utf-8'
    )
    file_handler.setFormatter(formatter)

    # В консоль - только ошибки
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.ERROR)
    console_handler.setFormatter(formatter)

    logger.setLevel(LOG_LEVEL if level is None else level)
    logger.addHandler(file_handler)
    logger.addHandler(console_handler)
    logger.propagate = False
    return logger


def get_logger(component):
    """Возвращает логгер компонента (создается при первом обращении)"""
    if component not in _loggers:
        _loggers[component] = setup_logger(component, f"{component}.log")
    return _loggers[component]


def log_error(component, error, context=None):
    """Логирование ошибки с контекстом"""
    error_msg = f"[{component}] {error}"
    if context:
        error_msg += f" | Context: {context}"

    if 'errors' not in _loggers:
        _loggers['errors'] = setup_logger('errors', 'errors.log', logging.ERROR)
    _loggers['errors'].error(error_msg, exc_info=error if isinstance(error, BaseException) else None)
    get_logger(component).error(error_msg)


def log_info(component, message):
    """Логирование информационного сообщения"""
    get_logger(component).info(message)


def log_warning(component, message):
    """Логирование предупреждения"""
    get_logger(component).warning(message)
