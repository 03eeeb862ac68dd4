"""
Чтение и запись изображений, 1-битных масок и файлов патчей (PNG через Pillow)
"""
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from applier import Patch
from core import BinaryMask, ImageBuffer
from json_utils import read_json, write_json


def save_image(image: ImageBuffer, path) -> str:
    """Сохраняет изображение в 8-битный RGB PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.to_uint8()).save(path, format='PNG')
    return str(path)


def load_image(path, image_id: Optional[str] = None) -> ImageBuffer:
    path = Path(path)
    with Image.open(path) as img:
        array = np.asarray(img.convert('RGB'))
    return ImageBuffer.from_uint8(array, image_id if image_id is not None else path.stem)


def save_mask(mask: BinaryMask, path) -> str:
    """Сохраняет маску как 1-битный PNG (побитово восстанавливается load_mask)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.bits.astype(np.uint8) * 255).convert('1').save(path, format='PNG')
    return str(path)


def load_mask(path, image_id: str = "") -> BinaryMask:
    with Image.open(path) as img:
        bits = np.asarray(img.convert('L')) > 127
    return BinaryMask(bits, image_id)


def save_patch(patch: Patch, path) -> str:
    """
    Записывает патч: <stem>.png для просмотра, <stem>.npy с точными пикселями,
    <stem>_shape.png с маской формы и <stem>.json с метаданными
    """
    path = Path(path).with_suffix('.png')
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(patch.pixels * 255.0).astype(np.uint8)).save(path, format='PNG')
    np.save(path.with_suffix('.npy'), patch.pixels)
    shape_path = path.with_name(f"{path.stem}_shape.png")
    save_mask(BinaryMask(patch.shape_mask), shape_path)
    write_json(path.with_suffix('.json'), {
        'meta': patch.meta,
        'pixels': path.with_suffix('.npy').name,
        'shape_mask': shape_path.name,
        'size': [patch.height, patch.width],
    })
    return str(path)


def load_patch(path) -> Patch:
    """Читает патч, записанный save_patch; для обычного PNG маска формы полная"""
    path = Path(path)
    sidecar = path.with_suffix('.json')
    if not sidecar.exists():
        with Image.open(path) as img:
            return Patch(np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0, None,
                         {'attack_name': path.stem, 'patch_id': path.stem})

    info = read_json(sidecar)
    pixels_path = path.with_name(info['pixels'])
    if pixels_path.exists():
        pixels = np.load(pixels_path)
    else:
        with Image.open(path.with_suffix('.png')) as img:
            pixels = np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0
    shape_mask = load_mask(path.with_name(info['shape_mask'])).bits
    meta = dict(info.get('meta', {}))
    meta.setdefault('patch_id', path.stem)
    return Patch(pixels, shape_mask, meta)
