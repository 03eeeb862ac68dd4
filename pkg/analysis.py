"""
Анализ распределений патчей: FID между наборами эмбеддингов и радиальные спектры
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

import config
from applier import Patch
from errors import InvalidInputError
from logger_config import log_info


@dataclass
class EmbeddingSet:
    """Матрица эмбеддингов N x D и имя эмбеддера"""
    vectors: np.ndarray
    embedder_name: str = 'unknown'

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise InvalidInputError(f"Ожидается матрица N x D, получено {vectors.shape}")
        if vectors.shape[0] < 2:
            raise InvalidInputError("В наборе эмбеддингов нужно хотя бы 2 вектора")
        self.vectors = vectors

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def mean(self) -> np.ndarray:
        return self.vectors.mean(axis=0)

    def covariance(self, shrinkage: Optional[float] = None) -> np.ndarray:
        """Выборочная ковариация; при N <= D на диагональ добавляется shrinkage"""
        if shrinkage is None:
            shrinkage = config.ANALYSIS_SETTINGS['shrinkage']
        cov = np.atleast_2d(np.cov(self.vectors, rowvar=False, ddof=1))
        if self.size <= self.dim:
            cov = cov + shrinkage * np.eye(self.dim)
        return cov


@dataclass
class SpectrumHistogram:
    bin_edges: np.ndarray
    energy_fraction: np.ndarray
    total_energy: float = 0.0

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'bin_edges': self.bin_edges.tolist(),
            'energy_fraction': self.energy_fraction.tolist(),
            'total_energy': self.total_energy,
        }


class RandomProjectionEmbedder:
    """
    Фиксированная случайная проекция уменьшенных до side x side пикселей в D измерений

    Имя включает версию и параметры: эмбеддинги разных версий не сравниваются.
    """
    version = 1

    def __init__(self, side: Optional[int] = None, dim: Optional[int] = None, seed: Optional[int] = None):
        settings = config.ANALYSIS_SETTINGS
        self.side = side or settings['embed_side']
        self.dim = dim or settings['embed_dim']
        self.seed = settings['embed_seed'] if seed is None else seed
        rng = np.random.default_rng(self.seed)
        inputs = self.side * self.side * 3
        self.projection = rng.standard_normal((inputs, self.dim)) / np.sqrt(inputs)

    @property
    def name(self) -> str:
        return f"random-projection-v{self.version}-s{self.side}-d{self.dim}-seed{self.seed}"

    def downsample(self, pixels: np.ndarray) -> np.ndarray:
        tensor = torch.from_numpy(np.asarray(pixels, dtype=np.float64)).permute(2, 0, 1).unsqueeze(0)
        pooled = F.adaptive_avg_pool2d(tensor, (self.side, self.side))[0]
        return pooled.permute(1, 2, 0).numpy()

    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        flat = np.stack([self.downsample(img).reshape(-1) for img in images])
        return flat @ self.projection


def random_crops(pixels: np.ndarray, count: int, crop_fraction: float,
                 rng: np.random.Generator) -> List[np.ndarray]:
    h, w = pixels.shape[:2]
    side = max(1, int(round(crop_fraction * min(h, w))))
    crops = []
    for _ in range(count):
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        crops.append(pixels[top:top + side, left:left + side])
    return crops


def embed_patches(patch: Union[Patch, np.ndarray], embedder: Optional[RandomProjectionEmbedder] = None,
                  crops: Optional[int] = None, crop_fraction: Optional[float] = None,
                  seed: int = 0) -> EmbeddingSet:
    """Набор эмбеддингов патча по случайным кропам (кропы зависят только от seed и размера)"""
    settings = config.ANALYSIS_SETTINGS
    embedder = embedder or RandomProjectionEmbedder()
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    rng = np.random.default_rng(seed)
    samples = random_crops(pixels, crops or settings['crops_per_patch'],
                           crop_fraction or settings['crop_fraction'], rng)
    return EmbeddingSet(embedder.embed(samples), embedder.name)


def embed_images(images: Sequence[np.ndarray], embedder: Optional[RandomProjectionEmbedder] = None) -> EmbeddingSet:
    embedder = embedder or RandomProjectionEmbedder()
    return EmbeddingSet(embedder.embed(images), embedder.name)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = scipy.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def fid(a: EmbeddingSet, b: EmbeddingSet, shrinkage: Optional[float] = None) -> float:
    """
    Расстояние Фреше между гауссовыми приближениями двух наборов

    Tr((Σa Σb)^{1/2}) считается через собственные значения симметричной матрицы
    Σa^{1/2} Σb Σa^{1/2}; малые отрицательные значения обнуляются.
    """
    if a.dim != b.dim:
        raise InvalidInputError(f"Размерности эмбеддингов не совпадают: {a.dim} vs {b.dim}")
    diff = a.mean() - b.mean()
    cov_a = a.covariance(shrinkage)
    cov_b = b.covariance(shrinkage)

    root_a = _psd_sqrt(cov_a)
    product = root_a @ cov_b @ root_a
    product = 0.5 * (product + product.T)
    eigenvalues = np.clip(scipy.linalg.eigvalsh(product), 0.0, None)
    trace_sqrt = float(np.sum(np.sqrt(eigenvalues)))

    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def _next_power_of_two(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def radial_energy(pixels: np.ndarray):
    """
    Энергия спектра |F|² / n² (сумма по каналам) и радиальная частота каждого коэффициента

    Изображение дополняется нулями до квадрата со стороной-степенью двойки.
    Сумма энергии равна сумме квадратов пикселей.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w = pixels.shape[:2]
    n = _next_power_of_two(max(h, w))
    padded = np.zeros((n, n, pixels.shape[2]))
    padded[:h, :w] = pixels

    spectrum = np.fft.fft2(padded, axes=(0, 1))
    energy = (np.abs(spectrum) ** 2).sum(axis=2) / (n * n)
    freqs = np.fft.fftfreq(n)
    radius = np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
    return energy, radius


def radial_spectrum(p: Union[Patch, np.ndarray], bins: Optional[int] = None) -> SpectrumHistogram:
    """Доли энергии по корзинам радиальной частоты на [0, 0.5]; радиусы > 0.5 идут в последнюю"""
    bins = bins or config.ANALYSIS_SETTINGS['spectrum_bins']
    pixels = p.pixels if isinstance(p, Patch) else p
    energy, radius = radial_energy(pixels)
    edges = np.linspace(0.0, 0.5, bins + 1)
    index = np.clip((radius / 0.5 * bins).astype(np.int64), 0, bins - 1)
    totals = np.bincount(index.ravel(), weights=energy.ravel(), minlength=bins)
    total = float(totals.sum())
    if total <= 0:
        fractions = np.zeros(bins)
        fractions[0] = 1.0
    else:
        fractions = totals / total
    return SpectrumHistogram(edges, fractions, total)


def high_frequency_fraction(spectrum: SpectrumHistogram, top_fraction: float = 1.0 / 3.0) -> float:
    """Доля энергии в верхней части радиусов (по умолчанию верхняя треть)"""
    threshold = 0.5 * (1.0 - top_fraction)
    return float(spectrum.energy_fraction[spectrum.bin_centers >= threshold].sum())


@dataclass
class DistributionReport:
    labels: List[str]
    groups: Dict[str, str]
    fid_matrix: np.ndarray
    mean_spectra: Dict[str, SpectrumHistogram]
    high_frequency: Dict[str, float]
    within_non_nap: float
    cross_nap_non_nap: float
    pattern_holds: bool
    embedder_name: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'labels': self.labels,
            'groups': self.groups,
            'fid_matrix': self.fid_matrix.tolist(),
            'mean_spectra': {k: v.to_dict() for k, v in self.mean_spectra.items()},
            'high_frequency': self.high_frequency,
            'within_non_nap': self.within_non_nap,
            'cross_nap_non_nap': self.cross_nap_non_nap,
            'pattern_holds': self.pattern_holds,
            'embedder_name': self.embedder_name,
        }


def _mean_spectrum(patches: Sequence[Any], bins: int) -> SpectrumHistogram:
    spectra = [radial_spectrum(p, bins) for p in patches]
    fractions = np.mean([s.energy_fraction for s in spectra], axis=0)
    return SpectrumHistogram(spectra[0].bin_edges, fractions / fractions.sum(),
                             float(np.mean([s.total_energy for s in spectra])))


def distribution_report(nap_patches: Sequence[Any], non_nap_patches: Sequence[Any],
                        clean_crops: Sequence[np.ndarray] = (),
                        embedder: Optional[RandomProjectionEmbedder] = None,
                        crops: Optional[int] = None, bins: Optional[int] = None,
                        seed: int = 0, workers: int = 1) -> DistributionReport:
    """
    Матрица попарных FID патчей (и чистых кропов) и средние спектры групп

    pattern_holds: FID внутри группы non-NAP в среднем меньше FID между NAP и non-NAP.
    """
    if len(nap_patches) < 2 or len(non_nap_patches) < 2:
        raise InvalidInputError("В каждой группе нужно не меньше 2 патчей")
    embedder = embedder or RandomProjectionEmbedder()
    bins = bins or config.ANALYSIS_SETTINGS['spectrum_bins']

    labels, groups, items = [], {}, []
    for group, patches in (('nap', nap_patches), ('non_nap', non_nap_patches)):
        for i, patch in enumerate(patches):
            label = patch.patch_id if isinstance(patch, Patch) else f"{group}_{i}"
            if label in groups:
                label = f"{group}_{i}"
            labels.append(label)
            groups[label] = group
            items.append(patch)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sets = list(pool.map(lambda patch: embed_patches(patch, embedder, crops, seed=seed), items))
    if len(clean_crops) >= 2:
        labels.append('clean')
        groups['clean'] = 'clean'
        sets.append(embed_images(clean_crops, embedder))

    size = len(sets)
    matrix = np.zeros((size, size))
    for i in range(size):
        for j in range(i + 1, size):
            matrix[i, j] = matrix[j, i] = fid(sets[i], sets[j])

    def mean_of(pairs):
        values = [matrix[i, j] for i, j in pairs]
        return float(np.mean(values)) if values else 0.0

    non_nap = [i for i, label in enumerate(labels) if groups[label] == 'non_nap']
    nap = [i for i, label in enumerate(labels) if groups[label] == 'nap']
    within = mean_of([(i, j) for i in non_nap for j in non_nap if i < j])
    cross = mean_of([(i, j) for i in nap for j in non_nap])

    mean_spectra = {'nap': _mean_spectrum(nap_patches, bins), 'non_nap': _mean_spectrum(non_nap_patches, bins)}
    report = DistributionReport(
        labels=labels,
        groups=groups,
        fid_matrix=matrix,
        mean_spectra=mean_spectra,
        high_frequency={k: high_frequency_fraction(v) for k, v in mean_spectra.items()},
        within_non_nap=within,
        cross_nap_non_nap=cross,
        pattern_holds=within < cross,
        embedder_name=embedder.name,
    )
    log_info('analysis', f"FID: внутри non-NAP {within:.4f}, NAP-non-NAP {cross:.4f}")
    return report
