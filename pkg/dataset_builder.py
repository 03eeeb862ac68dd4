"""
Сборка датасета патчей: холст фиксированного размера, наложение каждого патча
на каждое чистое изображение, маски, манифест и разбиение train/test.

Также загрузка корпуса с разметкой и прием таблиц физических испытаний.
"""
import json
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

import config
from applier import ConcreteTransform, Patch, Placement, TransformSpec, apply_patches, default_placements, \
    sample_transform
from core import BoundingBox, DetectionSet, GroundTruthSet, ImageBuffer, derive_seed
from errors import InvalidConfigError, InvalidInputError
from image_io import load_image, load_mask, save_image, save_mask, save_patch
from json_utils import read_json, write_json
from logger_config import log_info, log_warning
from metrics import EvalRecord, persons_hidden

MANIFEST_NAME = 'manifest.json'
ANGLE_BINS = ((-90.0, -30.0), (-30.0, 30.0), (30.0, 90.0))
DISTANCES = (3, 6, 9)


@dataclass
class CanvasPolicy:
    """Приведение изображения к холсту side x side: letterbox (pad) или растяжение (resize)"""
    side: int = 416
    mode: str = 'pad'
    pad_value: float = 0.5

    def __post_init__(self):
        if self.mode not in ('pad', 'resize'):
            raise InvalidConfigError(f"Неизвестный режим холста: {self.mode}")
        if self.side < 1:
            raise InvalidConfigError("side должен быть >= 1")

    @classmethod
    def from_settings(cls, overrides: Optional[Dict[str, Any]] = None) -> "CanvasPolicy":
        return cls(**config.merged('canvas', overrides))

    def to_dict(self) -> Dict[str, Any]:
        return {'side': self.side, 'mode': self.mode, 'pad_value': self.pad_value}

    @staticmethod
    def _resize(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
        if pixels.shape[:2] == (height, width):
            return pixels
        tensor = torch.from_numpy(pixels).permute(2, 0, 1).unsqueeze(0)
        shrink = height < pixels.shape[0] or width < pixels.shape[1]
        resized = F.interpolate(tensor, size=(height, width), mode='bilinear', align_corners=False,
                                antialias=shrink)
        return torch.clamp(resized[0], 0.0, 1.0).permute(1, 2, 0).numpy()

    def apply(self, image: ImageBuffer, gt: GroundTruthSet) -> Tuple[ImageBuffer, GroundTruthSet, Dict[str, float]]:
        """Возвращает изображение на холсте, пересчитанную разметку и параметры преобразования"""
        h, w = image.height, image.width
        if self.mode == 'resize':
            sx, sy = self.side / w, self.side / h
            pixels = self._resize(image.pixels, self.side, self.side)
            ox = oy = 0
        else:
            scale = min(1.0, self.side / max(h, w))
            sx = sy = scale
            nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
            resized = self._resize(image.pixels, nh, nw)
            pixels = np.full((self.side, self.side, 3), self.pad_value)
            oy, ox = (self.side - nh) // 2, (self.side - nw) // 2
            pixels[oy:oy + nh, ox:ox + nw] = resized

        boxes = []
        for b in gt.boxes:
            x0 = min(max(b.x_min * sx + ox, 0.0), self.side)
            y0 = min(max(b.y_min * sy + oy, 0.0), self.side)
            x1 = min(max(b.x_max * sx + ox, 0.0), self.side)
            y1 = min(max(b.y_max * sy + oy, 0.0), self.side)
            if x1 > x0 and y1 > y0:
                boxes.append(BoundingBox(x0, y0, x1, y1, b.class_id, b.score))
        record = {'scale_x': sx, 'scale_y': sy, 'offset_x': ox, 'offset_y': oy}
        return ImageBuffer(pixels, image.id), GroundTruthSet(gt.image_id, boxes), record


@dataclass
class DatasetManifest:
    entries: List[Dict[str, Any]] = field(default_factory=list)
    seed: int = 0
    canvas: Dict[str, Any] = field(default_factory=dict)
    skipped: List[Dict[str, str]] = field(default_factory=list)
    root: str = ''

    @property
    def counts(self) -> Dict[str, int]:
        return {
            'entries': len(self.entries),
            'train': sum(1 for e in self.entries if e.get('split') == 'train'),
            'test': sum(1 for e in self.entries if e.get('split') == 'test'),
            'patches': len({e['patch_id'] for e in self.entries}),
            'images': len({e['source_image'] for e in self.entries}),
            'skipped': len(self.skipped),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            'entries': self.entries,
            'seed': self.seed,
            'canvas': self.canvas,
            'skipped': self.skipped,
            'counts': self.counts,
        }

    @classmethod
    def from_dict(cls, row: Dict[str, Any], root: str = '') -> "DatasetManifest":
        return cls(entries=list(row.get('entries', [])), seed=int(row.get('seed', 0)),
                   canvas=dict(row.get('canvas', {})), skipped=list(row.get('skipped', [])), root=root)

    def save(self, root=None) -> str:
        root = Path(root or self.root)
        return write_json(root / MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        return cls.from_dict(read_json(root / MANIFEST_NAME), str(root))


def _entry_rng(seed: int, patch_id: str, image_id: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, f"transform:{patch_id}:{image_id}"))


def _build_entry(root: Path, patch: Patch, image: ImageBuffer, gt: GroundTruthSet, canvas_record: Dict[str, float],
                 spec: TransformSpec, placement_settings: Dict[str, Any], seed: int) -> Dict[str, Any]:
    placements = default_placements(gt, placement_settings['patches_per_person'], placement_settings['max_patches'])
    if not placements:
        return {'skip': True, 'patch_id': patch.patch_id, 'source_image': image.id}

    rng = _entry_rng(seed, patch.patch_id, image.id)
    transforms = [sample_transform(spec, rng) for _ in placements]
    patched, mask = apply_patches(image, patch, transforms, placements)
    entry_id = f"{patch.patch_id}__{image.id}"
    image_file = Path('images') / patch.patch_id / f"{image.id}.png"
    mask_file = Path('masks') / patch.patch_id / f"{image.id}.png"
    save_image(ImageBuffer(patched.pixels, entry_id), root / image_file)
    save_mask(mask, root / mask_file)
    return {
        'image_id': entry_id,
        'source_image': image.id,
        'patch_id': patch.patch_id,
        'transforms': [t.to_dict() for t in transforms],
        'placements': [p.to_dict() for p in placements],
        'canvas_transform': canvas_record,
        'ground_truth': gt.to_dict()['boxes'],
        'image_file': image_file.as_posix(),
        'mask_file': mask_file.as_posix(),
        'mask_area': mask.area,
        'split': None,
    }


def build_dataset(patches: Sequence[Patch], corpus: Sequence[Tuple[ImageBuffer, GroundTruthSet]],
                  policy: Optional[CanvasPolicy], seed: int, out_root,
                  transform_spec: Optional[TransformSpec] = None,
                  placement_settings: Optional[Dict[str, Any]] = None,
                  split_ratio: Optional[float] = 0.6, workers: int = 1) -> DatasetManifest:
    """
    Накладывает каждый патч на каждое изображение корпуса и пишет датасет

    Записи собираются в порядке "патч, затем изображение" независимо от числа потоков.
    Изображения без людей в разметке пропускаются (попадают в manifest.skipped).

    Raises:
        OSError: каталог out_root недоступен для записи
    """
    if not patches or not corpus:
        raise InvalidInputError("Нужны хотя бы один патч и одно изображение")
    policy = policy or CanvasPolicy.from_settings()
    spec = transform_spec or TransformSpec.from_settings(config.TRANSFORM_SETTINGS, derive_seed(seed, 'transform'))
    placement_settings = config.merged('placement', placement_settings)
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)

    ids = [p.patch_id for p in patches]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"Повторяющиеся patch_id: {ids}")
    for patch in patches:
        save_patch(patch, root / 'patches' / f"{patch.patch_id}.png")

    canvased = [policy.apply(image, gt) for image, gt in corpus]
    jobs = [(patch, item) for patch in patches for item in canvased]

    def run(job):
        patch, (image, gt, record) = job
        return _build_entry(root, patch, image, gt, record, spec, placement_settings, seed)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, jobs))

    manifest = DatasetManifest(seed=seed, canvas=policy.to_dict(), root=str(root))
    for result in results:
        if result.get('skip'):
            log_warning('dataset', f"Пропуск {result['source_image']} для {result['patch_id']}: нет людей в разметке")
            manifest.skipped.append({'patch_id': result['patch_id'], 'source_image': result['source_image']})
        else:
            manifest.entries.append(result)

    if split_ratio is not None:
        manifest = split_dataset(manifest, split_ratio, seed)
    manifest.save(root)
    log_info('dataset', f"Датасет собран в {root}: {manifest.counts}")
    return manifest


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _stratified_quotas(sizes: List[int], ratio: float) -> List[int]:
    """Квоты train по группам: метод наибольших остатков под общий round(ratio * N)"""
    target = _round_half_up(ratio * sum(sizes))
    exact = [ratio * n for n in sizes]
    quotas = [min(max(int(math.floor(q)), 1), n - 1) for q, n in zip(exact, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - math.floor(exact[i])), i))
    remaining = target - sum(quotas)
    for i in order:
        if remaining <= 0:
            break
        if quotas[i] + 1 <= sizes[i] - 1 and quotas[i] + 1 <= math.ceil(exact[i]):
            quotas[i] += 1
            remaining -= 1
    return quotas


def split_dataset(manifest: DatasetManifest, ratio: float = 0.6, seed: int = 0) -> DatasetManifest:
    """
    Детерминированное разбиение, стратифицированное по patch_id

    Если в какой-то группе меньше 2 записей, выполняется глобальное разбиение.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidConfigError(f"Доля train должна лежать в (0, 1), получено {ratio}")
    entries = [dict(e) for e in manifest.entries]
    groups: "OrderedDict[str, List[int]]" = OrderedDict()
    for i, entry in enumerate(entries):
        groups.setdefault(entry['patch_id'], []).append(i)

    labels = ['test'] * len(entries)
    if any(len(members) < 2 for members in groups.values()):
        log_warning('dataset', "В некоторых группах меньше 2 записей: глобальное разбиение без стратификации")
        rng = np.random.default_rng(derive_seed(seed, 'split'))
        order = rng.permutation(len(entries))
        for i in order[:_round_half_up(ratio * len(entries))]:
            labels[int(i)] = 'train'
    else:
        quotas = _stratified_quotas([len(m) for m in groups.values()], ratio)
        for (patch_id, members), quota in zip(groups.items(), quotas):
            rng = np.random.default_rng(derive_seed(seed, f"split:{patch_id}"))
            shuffled = [members[int(i)] for i in rng.permutation(len(members))]
            for i in shuffled[:quota]:
                labels[i] = 'train'

    for entry, label in zip(entries, labels):
        entry['split'] = label
    return DatasetManifest(entries, manifest.seed, dict(manifest.canvas), list(manifest.skipped), manifest.root)


def verify_manifest(manifest: DatasetManifest, patches: Dict[str, Patch],
                    corpus: Sequence[Tuple[ImageBuffer, GroundTruthSet]],
                    policy: Optional[CanvasPolicy] = None) -> List[str]:
    """
    Пересобирает маску каждой записи по записанным преобразованиям и сверяет с файлом

    Returns:
        id записей, у которых маски не совпали
    """
    policy = policy or CanvasPolicy(**manifest.canvas)
    sources = {image.id: (image, gt) for image, gt in corpus}
    root = Path(manifest.root)
    mismatched = []
    for entry in manifest.entries:
        image, gt = sources[entry['source_image']]
        canvas_image, _, _ = policy.apply(image, gt)
        transforms = [ConcreteTransform.from_dict(t) for t in entry['transforms']]
        placements = [Placement.from_dict(p) for p in entry['placements']]
        _, mask = apply_patches(canvas_image, patches[entry['patch_id']], transforms, placements)
        stored = load_mask(root / entry['mask_file'])
        if stored.shape != mask.shape or not np.array_equal(stored.bits, mask.bits):
            mismatched.append(entry['image_id'])
    if mismatched:
        log_warning('dataset', f"Маски не совпали для {len(mismatched)} записей")
    return mismatched


def save_corpus(corpus: Sequence[Tuple[ImageBuffer, GroundTruthSet]], root) -> str:
    """Корпус на диске: images/<id>.png и annotations.json с боксами"""
    root = Path(root)
    annotations = {}
    for image, gt in corpus:
        save_image(image, root / 'images' / f"{image.id}.png")
        annotations[image.id] = gt.to_dict()['boxes']
    return write_json(root / 'annotations.json', annotations)


def load_corpus(root) -> List[Tuple[ImageBuffer, GroundTruthSet]]:
    root = Path(root)
    annotations = read_json(root / 'annotations.json')
    corpus = []
    for image_id in sorted(annotations):
        image = load_image(root / 'images' / f"{image_id}.png", image_id)
        corpus.append((image, GroundTruthSet.from_dict({'image_id': image_id, 'boxes': annotations[image_id]})))
    log_info('dataset', f"Загружен корпус {root}: {len(corpus)} изображений")
    return corpus


@dataclass
class PhysicalFrame:
    """Кадр физического испытания"""
    frame_id: str
    distance_m: int
    angle_deg: float
    light_level: int
    defense_name: str
    detector_name: str
    detections: DetectionSet
    ground_truth: GroundTruthSet

    def __post_init__(self):
        if self.distance_m not in DISTANCES:
            raise InvalidInputError(f"distance_m должен быть из {DISTANCES}, получено {self.distance_m}")
        if not -90.0 <= self.angle_deg < 90.0:
            raise InvalidInputError(f"angle_deg вне [-90, 90): {self.angle_deg}")
        if not 1 <= self.light_level <= 5:
            raise InvalidInputError(f"light_level вне 1..5: {self.light_level}")

    @property
    def angle_bin(self) -> str:
        for lo, hi in ANGLE_BINS:
            if lo <= self.angle_deg < hi:
                return f"[{lo:g},{hi:g})"
        raise InvalidInputError(f"angle_deg вне [-90, 90): {self.angle_deg}")


def _parse_boxes(text: Any, frame_id: str) -> List[BoundingBox]:
    if isinstance(text, float) and math.isnan(text):
        return []
    rows = json.loads(text) if isinstance(text, str) else text
    return [BoundingBox.from_dict(row) for row in rows]


def load_physical_results(path) -> List[PhysicalFrame]:
    """
    Читает CSV физических испытаний

    Колонки: frame_id, distance_m, angle_deg, light_level, defense_name,
    detector_name, detections (JSON), ground_truth (JSON)
    """
    table = pd.read_csv(path, dtype={'frame_id': str})
    required = ['frame_id', 'distance_m', 'angle_deg', 'light_level', 'defense_name',
                'detector_name', 'detections', 'ground_truth']
    missing = [c for c in required if c not in table.columns]
    if missing:
        raise InvalidInputError(f"В таблице нет колонок: {missing}")

    frames = []
    for index, row in table.iterrows():
        frame_id = str(row['frame_id'])
        try:
            frames.append(PhysicalFrame(
                frame_id=frame_id,
                distance_m=int(row['distance_m']),
                angle_deg=float(row['angle_deg']),
                light_level=int(row['light_level']),
                defense_name=str(row['defense_name']),
                detector_name=str(row['detector_name']),
                detections=DetectionSet(frame_id, _parse_boxes(row['detections'], frame_id)),
                ground_truth=GroundTruthSet(frame_id, _parse_boxes(row['ground_truth'], frame_id)),
            ))
        except (ValueError, KeyError, TypeError) as e:
            raise InvalidInputError(f"Строка {index + 2} таблицы {path}: {e}") from e
    log_info('dataset', f"Загружено {len(frames)} кадров физических испытаний из {path}")
    return frames


def aggregate_physical(frames: Sequence[PhysicalFrame], by: str = 'distance',
                       conf_thr: float = 0.5) -> pd.DataFrame:
    """Доля обнаруженных людей по (защита, детектор, условие съемки)"""
    keys = {
        'distance': lambda f: f.distance_m,
        'angle': lambda f: f.angle_bin,
        'light': lambda f: f.light_level,
    }
    if by not in keys:
        raise InvalidConfigError(f"Неизвестная группировка: {by}")

    rows = []
    for frame in frames:
        record = EvalRecord(frame.frame_id, 'physical', frame.defense_name, frame.detector_name,
                            frame.detections, frame.ground_truth)
        hidden, persons = persons_hidden(record, conf_thr)
        rows.append({'defense_name': frame.defense_name, 'detector_name': frame.detector_name,
                     by: keys[by](frame), 'frames': 1, 'persons': persons, 'hidden': hidden})

    columns = ['defense_name', 'detector_name', by, 'frames', 'persons', 'hidden', 'detection_rate', 'asr']
    if not rows:
        return pd.DataFrame(columns=columns)
    table = pd.DataFrame(rows).groupby(['defense_name', 'detector_name', by], as_index=False).sum()
    persons = table['persons'].where(table['persons'] > 0)
    table['asr'] = table['hidden'] / persons
    table['detection_rate'] = 1.0 - table['asr']
    return table[columns].sort_values(['defense_name', 'detector_name', by]).reset_index(drop=True)
