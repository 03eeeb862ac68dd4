"""
Защиты от патчей: изображение -> маска локализации -> очищенное изображение

Встроены защиты с априорными знаниями (LGS-подобное сглаживание, энтропийная
локализация), стирание с политиками заливки, стохастическое выпадение блоков и
адаптер внешних защит. Все маски проходят общую постобработку.
"""
import hashlib
import subprocess
import tempfile
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

import config
from core import BinaryMask, ImageBuffer
from errors import AdapterError, InvalidConfigError, InvalidInputError
from logger_config import log_error, log_info

FILL_POLICIES = ('black', 'mean', 'border-mean')


@dataclass
class LgsConfig:
    window: int = 8
    gradient_threshold: float = 0.2
    suppression: float = 0.9

    def validate(self):
        if self.window < 2:
            raise InvalidConfigError("window LGS должно быть >= 2")
        if not 0.0 <= self.suppression <= 1.0:
            raise InvalidConfigError("suppression должен лежать в [0, 1]")
        return self

    @classmethod
    def from_settings(cls, overrides: Optional[Dict[str, Any]] = None) -> "LgsConfig":
        return cls(**config.merged('lgs', overrides)).validate()


@dataclass
class EntropyConfig:
    window: int = 8
    bins: int = 16
    entropy_threshold: float = 3.0

    def validate(self):
        if self.bins < 2:
            raise InvalidConfigError("bins должно быть >= 2")
        if self.window < 2:
            raise InvalidConfigError("window должно быть >= 2")
        return self

    @classmethod
    def from_settings(cls, overrides: Optional[Dict[str, Any]] = None) -> "EntropyConfig":
        return cls(**config.merged('entropy', overrides)).validate()


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, ImageBuffer):
        return torch.from_numpy(x.pixels)
    return x


def _check_shapes(x: ImageBuffer, mask: BinaryMask):
    if mask.shape != (x.height, x.width):
        raise InvalidInputError(f"Маска {mask.shape} не совпадает с изображением {(x.height, x.width)}")


def window_mean(maps: torch.Tensor, window: int) -> torch.Tensor:
    """Среднее по окну window x window с центром в пикселе (края повторяются); maps: C x H x W"""
    before = window // 2
    after = window - 1 - before
    padded = F.pad(maps.unsqueeze(0), (before, after, before, after), mode='replicate')
    return F.avg_pool2d(padded, kernel_size=window, stride=1)[0]


def gradient_magnitude(x_t: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """
    Модуль градиента по прямым разностям, усредненный по каналам (H x W)

    eps > 0 нужен только там, где берется производная: sqrt не дифференцируем в нуле.
    """
    img = x_t.permute(2, 0, 1)
    padded = F.pad(img.unsqueeze(0), (0, 1, 0, 1), mode='replicate')[0]
    dx = padded[:, :-1, 1:] - padded[:, :-1, :-1]
    dy = padded[:, 1:, :-1] - padded[:, :-1, :-1]
    return torch.sqrt(dx * dx + dy * dy + eps).mean(dim=0)


def lgs_score(x_t: torch.Tensor, cfg: LgsConfig, eps: float = 0.0) -> torch.Tensor:
    """Среднее по окну значение модуля градиента (H x W)"""
    return window_mean(gradient_magnitude(x_t, eps).unsqueeze(0), cfg.window)[0]


def histogram_entropy(counts) -> float:
    """Энтропия Шеннона гистограммы в битах"""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def bin_memberships(x_t: torch.Tensor, bins: int, soft: bool = False) -> torch.Tensor:
    """
    Принадлежность значений корзинам гистограммы на [0, 1]: bins x C x H x W

    Жесткий вариант - индикатор корзины, мягкий - гауссово ядро с шириной 1/bins,
    нормированное по корзинам.
    """
    img = x_t.permute(2, 0, 1)
    if not soft:
        index = torch.clamp((img * bins).floor().long(), 0, bins - 1)
        return F.one_hot(index, bins).permute(3, 0, 1, 2).to(x_t.dtype)
    centers = (torch.arange(bins, dtype=x_t.dtype) + 0.5) / bins
    bandwidth = 1.0 / bins
    distance = img.unsqueeze(0) - centers.view(-1, 1, 1, 1)
    weights = torch.exp(-0.5 * (distance / bandwidth) ** 2)
    return weights / weights.sum(dim=0, keepdim=True)


def window_entropy(x_t: torch.Tensor, window: int, bins: int, soft: bool = False) -> torch.Tensor:
    """Энтропия (биты) гистограммы значений всех каналов в окне вокруг каждого пикселя"""
    members = bin_memberships(x_t, bins, soft)
    b, c, h, w = members.shape
    probs = window_mean(members.reshape(b * c, h, w), window).reshape(b, c, h, w).mean(dim=1)
    return torch.special.entr(probs).sum(dim=0) / np.log(2.0)


def postprocess_mask(bits: np.ndarray, min_area: Optional[int] = None) -> np.ndarray:
    """Удаляет компоненты связности площадью меньше min_area"""
    if min_area is None:
        min_area = config.MASK_SETTINGS['min_component_area']
    bits = np.asarray(bits, dtype=bool)
    if not bits.any() or min_area <= 1:
        return bits
    labels, count = ndimage.label(bits)
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def lgs_localize(x, cfg: LgsConfig) -> BinaryMask:
    """Маска там, где среднее по окну значение модуля градиента превышает порог"""
    image_id = x.id if isinstance(x, ImageBuffer) else ""
    with torch.no_grad():
        bits = (lgs_score(_as_tensor(x), cfg) > cfg.gradient_threshold).numpy()
    return BinaryMask(postprocess_mask(bits), image_id)


def lgs_purify_tensor(x_t: torch.Tensor, mask: np.ndarray, cfg: LgsConfig) -> torch.Tensor:
    """Дифференцируемое подавление: mean + (1 - s)(x - mean) внутри маски"""
    if not mask.any():
        return x_t
    mean = window_mean(x_t.permute(2, 0, 1), cfg.window).permute(1, 2, 0)
    smoothed = torch.clamp(mean + (1.0 - cfg.suppression) * (x_t - mean), 0.0, 1.0)
    return torch.where(torch.from_numpy(mask).unsqueeze(-1), smoothed, x_t)


def lgs_purify(x: ImageBuffer, mask: BinaryMask, cfg: LgsConfig) -> ImageBuffer:
    _check_shapes(x, mask)
    with torch.no_grad():
        out = lgs_purify_tensor(torch.from_numpy(x.pixels), mask.bits, cfg)
    return ImageBuffer(out.numpy(), x.id)


def entropy_localize(x, cfg: EntropyConfig) -> BinaryMask:
    """Маска окон с энтропией гистограммы выше порога (без мелких компонент)"""
    image_id = x.id if isinstance(x, ImageBuffer) else ""
    with torch.no_grad():
        entropy = window_entropy(_as_tensor(x), cfg.window, cfg.bins)
        bits = (entropy > cfg.entropy_threshold).numpy()
    return BinaryMask(postprocess_mask(bits), image_id)


def erase_tensor(x_t: torch.Tensor, mask: np.ndarray, fill: str = 'black') -> torch.Tensor:
    """Дифференцируемое стирание: значения заливки зависят от пикселей вне маски"""
    if fill not in FILL_POLICIES:
        raise InvalidConfigError(f"Неизвестная политика заливки: {fill}")
    if not mask.any():
        return x_t

    mask_t = torch.from_numpy(mask).unsqueeze(-1)
    if fill == 'black':
        values = torch.zeros_like(x_t)
    elif fill == 'mean':
        values = x_t.mean(dim=(0, 1)).expand_as(x_t)
    else:
        values = torch.zeros_like(x_t)
        labels, count = ndimage.label(mask)
        for label in range(1, count + 1):
            component = labels == label
            ring = ndimage.binary_dilation(component, structure=np.ones((3, 3), dtype=bool),
                                           iterations=2) & ~mask
            if ring.any():
                fill_value = x_t[torch.from_numpy(ring)].mean(dim=0)
            else:
                # Кольца нет (маска на все изображение): глобальное среднее
                fill_value = x_t.mean(dim=(0, 1))
            values = values + torch.from_numpy(component).unsqueeze(-1).to(x_t.dtype) * fill_value
    return torch.where(mask_t, values, x_t)


def erase(x: ImageBuffer, mask: BinaryMask, fill: str = 'black') -> ImageBuffer:
    """
    Заменяет пиксели под маской

    black -> 0, mean -> среднее изображения по каналам,
    border-mean -> среднее двухпиксельного кольца вокруг каждой компоненты
    """
    _check_shapes(x, mask)
    with torch.no_grad():
        out = erase_tensor(torch.from_numpy(x.pixels), mask.bits, fill)
    return ImageBuffer(out.numpy(), x.id)


class Defense(ABC):
    """
    Контракт защиты: localize -> purify

    Для white-box адаптивных атак защиты предоставляют дифференцируемый
    purify_tensor; маска при этом считается константой.
    """
    name = 'defense'
    differentiable = True
    stochastic = False
    thread_safe = True

    @abstractmethod
    def localize(self, x: ImageBuffer) -> BinaryMask:
        pass

    def purify_tensor(self, x_t: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
        raise AdapterError(f"Защита '{self.name}' не предоставляет градиенты")

    def purify(self, x: ImageBuffer, mask: BinaryMask) -> ImageBuffer:
        _check_shapes(x, mask)
        with torch.no_grad():
            out = self.purify_tensor(torch.from_numpy(x.pixels), mask.bits)
        return ImageBuffer(out.numpy(), x.id)

    def defend(self, x: ImageBuffer) -> Tuple[ImageBuffer, BinaryMask]:
        mask = self.localize(x)
        return self.purify(x, mask), mask

    def localize_tensor(self, x_t: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.localize(ImageBuffer(x_t.detach().numpy())).bits

    def defend_tensor(self, x_t: torch.Tensor) -> Tuple[torch.Tensor, np.ndarray]:
        """Дифференцируемый проход: маска по отсоединенным пикселям, purify с градиентом"""
        mask = self.localize_tensor(x_t)
        return self.purify_tensor(x_t, mask), mask

    def localization_score(self, x_t: torch.Tensor) -> Optional[Tuple[torch.Tensor, float]]:
        """
        Дифференцируемая карта оценки локализатора и ее порог

        Маска localize - это (score > threshold) после постобработки.
        None: у защиты нет гладкой оценки (например, случайная маска).
        """
        return None

    def reseed(self, seed: int):
        """Переустанавливает генератор стохастических защит"""


class IdentityDefense(Defense):
    name = 'identity'

    def localize(self, x: ImageBuffer) -> BinaryMask:
        return BinaryMask.empty_like(x)

    def localize_tensor(self, x_t: torch.Tensor) -> np.ndarray:
        return np.zeros(tuple(x_t.shape[:2]), dtype=bool)

    def purify_tensor(self, x_t, mask):
        return x_t


class LgsDefense(Defense):
    """Сглаживание областей с сильным локальным градиентом"""
    name = 'lgs'

    def __init__(self, cfg: Optional[LgsConfig] = None):
        self.cfg = (cfg or LgsConfig.from_settings()).validate()

    def localize(self, x):
        return lgs_localize(x, self.cfg)

    def localize_tensor(self, x_t):
        return lgs_localize(x_t.detach(), self.cfg).bits

    def purify(self, x, mask):
        return lgs_purify(x, mask, self.cfg)

    def purify_tensor(self, x_t, mask):
        return lgs_purify_tensor(x_t, mask, self.cfg)

    def localization_score(self, x_t):
        return lgs_score(x_t, self.cfg, eps=1e-12), self.cfg.gradient_threshold


class EntropyDefense(Defense):
    """Энтропийная локализация с последующим стиранием"""
    name = 'entropy'

    def __init__(self, cfg: Optional[EntropyConfig] = None, fill: str = 'mean'):
        self.cfg = (cfg or EntropyConfig.from_settings()).validate()
        if fill not in FILL_POLICIES:
            raise InvalidConfigError(f"Неизвестная политика заливки: {fill}")
        self.fill = fill

    def localize(self, x):
        return entropy_localize(x, self.cfg)

    def localize_tensor(self, x_t):
        return entropy_localize(x_t.detach(), self.cfg).bits

    def purify_tensor(self, x_t, mask):
        return erase_tensor(x_t, mask, self.fill)

    def localization_score(self, x_t):
        # Значение - жесткая энтропия, производная - от мягкой гистограммы
        with torch.no_grad():
            hard = window_entropy(x_t, self.cfg.window, self.cfg.bins)
        soft = window_entropy(x_t, self.cfg.window, self.cfg.bins, soft=True)
        return soft + (hard - soft).detach(), self.cfg.entropy_threshold


class EraseDefense(Defense):
    """Стирание с произвольным локализатором: любая защита дает маску, заливка по политике"""

    def __init__(self, localizer: Defense, fill: str = 'black'):
        if fill not in FILL_POLICIES:
            raise InvalidConfigError(f"Неизвестная политика заливки: {fill}")
        self.localizer = localizer
        self.fill = fill
        self.name = f"{localizer.name}-erase-{fill}"
        self.stochastic = localizer.stochastic

    def localize(self, x):
        return self.localizer.localize(x)

    def localize_tensor(self, x_t):
        return self.localizer.localize_tensor(x_t)

    def purify_tensor(self, x_t, mask):
        return erase_tensor(x_t, mask, self.fill)

    def localization_score(self, x_t):
        return self.localizer.localization_score(x_t)

    def reseed(self, seed: int):
        self.localizer.reseed(seed)


class RandomDropoutDefense(Defense):
    """
    Стохастическая защита: случайные квадратные блоки стираются с вероятностью rate
    """
    name = 'dropout'
    stochastic = True
    thread_safe = False

    def __init__(self, rate: float = 0.3, block: int = 4, fill: str = 'mean', seed: int = 0):
        if not 0.0 <= rate <= 1.0:
            raise InvalidConfigError("rate должен лежать в [0, 1]")
        if block < 1:
            raise InvalidConfigError("block должен быть >= 1")
        self.rate = rate
        self.block = block
        self.fill = fill
        self.reseed(seed)

    def reseed(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def _draw(self, height: int, width: int) -> np.ndarray:
        rows = -(-height // self.block)
        cols = -(-width // self.block)
        cells = self._rng.random((rows, cols)) < self.rate
        bits = np.repeat(np.repeat(cells, self.block, axis=0), self.block, axis=1)
        return bits[:height, :width]

    def localize(self, x):
        return BinaryMask(self._draw(x.height, x.width), x.id)

    def localize_tensor(self, x_t):
        return self._draw(x_t.shape[0], x_t.shape[1])

    def purify_tensor(self, x_t, mask):
        return erase_tensor(x_t, mask, self.fill)


class ExternalDefenseAdapter(Defense):
    """
    Защита во внешнем процессе

    Команда вызывается как `<command> <image.png> <mask.png> <purified.png>` и
    должна записать 1-битную маску и очищенное изображение.
    """
    differentiable = False

    def __init__(self, name: str, command: Sequence[str], thread_safe: bool = False,
                 timeout: float = 300.0):
        if not command:
            raise InvalidConfigError(f"Для внешней защиты '{name}' не задана команда")
        self.name = name
        self.command = list(command)
        self.thread_safe = bool(thread_safe)
        self.timeout = timeout
        self.invocations = 0
        self._last: Optional[Tuple[Tuple[str, str], Tuple[ImageBuffer, BinaryMask]]] = None
        self._lock = threading.Lock()

    @staticmethod
    def _key(x: ImageBuffer) -> Tuple[str, str]:
        return x.id, hashlib.sha1(np.ascontiguousarray(x.pixels).tobytes()).hexdigest()

    def _exchange(self, x: ImageBuffer) -> Tuple[ImageBuffer, BinaryMask]:
        """Один вызов процесса на изображение: localize и purify подряд берут последний результат"""
        key = self._key(x)
        with self._lock:
            if self._last is not None and self._last[0] == key:
                return self._last[1]
        result = self._run(x)
        with self._lock:
            self._last = (key, result)
        return result

    def _run(self, x: ImageBuffer) -> Tuple[ImageBuffer, BinaryMask]:
        from image_io import load_image, load_mask, save_image

        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            image_path, mask_path, purified_path = tmp / 'image.png', tmp / 'mask.png', tmp / 'purified.png'
            save_image(x, image_path)
            try:
                with self._lock:
                    self.invocations += 1
                subprocess.run(self.command + [str(image_path), str(mask_path), str(purified_path)],
                               capture_output=True, text=True, timeout=self.timeout, check=True)
                mask = load_mask(mask_path, x.id)
                purified = load_image(purified_path, x.id)
            except (subprocess.SubprocessError, OSError, ValueError) as e:
                log_error('defense', e, context=f"defense={self.name} image={x.id}")
                raise AdapterError(f"Внешняя защита '{self.name}' завершилась с ошибкой: {e}") from e
        if mask.shape != (x.height, x.width) or purified.pixels.shape != x.pixels.shape:
            raise AdapterError(f"Внешняя защита '{self.name}' вернула данные другого размера")
        return purified, mask

    def localize(self, x):
        return self._exchange(x)[1]

    def purify(self, x, mask):
        _check_shapes(x, mask)
        purified, _ = self._exchange(x)
        # Вне маски пиксели остаются исходными
        return ImageBuffer(np.where(mask.bits[..., None], purified.pixels, x.pixels), x.id)

    def defend(self, x):
        purified, mask = self._exchange(x)
        return ImageBuffer(np.where(mask.bits[..., None], purified.pixels, x.pixels), x.id), mask


def build_defense(spec: Any, settings: Optional[Dict[str, Any]] = None) -> Defense:
    """
    Реестр защит

    spec: 'identity' | 'lgs' | 'entropy' | 'dropout' | 'lgs-erase' | 'entropy-erase'
    или словарь {'id': ..., 'fill': ..., 'settings': {...}} / {'id': 'external', 'command': [...]}
    """
    if isinstance(spec, str):
        spec = {'id': spec}
    if not isinstance(spec, dict) or 'id' not in spec:
        raise InvalidConfigError(f"Неверное описание защиты: {spec}")
    overrides = dict(settings or {})
    overrides.update(spec.get('settings', {}))
    kind = spec['id']

    if kind == 'identity':
        defense = IdentityDefense()
    elif kind == 'lgs':
        defense = LgsDefense(LgsConfig.from_settings(overrides))
    elif kind == 'entropy':
        defense = EntropyDefense(EntropyConfig.from_settings(overrides), fill=spec.get('fill', 'mean'))
    elif kind in ('lgs-erase', 'entropy-erase'):
        localizer = build_defense({'id': kind.split('-')[0], 'settings': overrides})
        defense = EraseDefense(localizer, fill=spec.get('fill', 'black'))
    elif kind == 'dropout':
        defense = RandomDropoutDefense(**overrides)
    elif kind == 'external':
        defense = ExternalDefenseAdapter(spec.get('name', 'external'), spec.get('command', []),
                                         thread_safe=bool(spec.get('thread_safe', False)))
    else:
        raise InvalidConfigError(f"Неизвестная защита: {kind}")

    if 'name' in spec:
        defense.name = spec['name']
    log_info('defense', f"Создана защита {defense.name}")
    return defense
