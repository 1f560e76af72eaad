"""Synthetic volumes, dataset manifests and the training input pipeline.

Volume files are raw little-endian arrays whose shapes live in the manifest:
float32 for intensities and uint8 {0, 1} for labels.
"""
import logging
import math
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy.spatial.transform import Rotation

from pdc_segmentation.errors import ConfigurationError, DataError, NormalizationError, ShapeError
from pdc_segmentation.model import DatasetManifest, SampleEntry, SplitName, TrainConfig, VolumeSample

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
MIN_EXTENT = 16

FOREGROUND_LEVEL = 0.8
BACKGROUND_LEVEL = 0.2
BIAS_AMPLITUDE = 0.1

SEMI_AXIS_RANGE = (0.15, 0.35)
LOBE_SCALE_RANGE = (0.25, 0.5)
# caps the main body at 12% of the volume, three lobes add at most 3/8 of that
MAX_BODY_FRACTION = 0.12


class SyntheticVolume(NamedTuple):
    intensity: np.ndarray
    label: np.ndarray
    clean: np.ndarray


class Transform(NamedTuple):
    flips: tuple[bool, bool, bool]
    rotations: int


class Batch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: torch.Tensor
    labels: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return int(self.images.shape[0])

    @classmethod
    def from_samples(cls, samples: Sequence[VolumeSample], labeled: bool) -> 'Batch':
        if not samples:
            return cls(images=torch.zeros((0, 1, 1, 1, 1)))

        images = torch.from_numpy(np.stack([s.intensity for s in samples]).astype(np.float32)).unsqueeze(1)
        labels = None
        if labeled:
            labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))

        return cls(images=images, labels=labels)


def _as_shape(shape: int | Sequence[int]) -> tuple[int, int, int]:
    if isinstance(shape, int):
        return shape, shape, shape
    if len(shape) != 3:
        raise ConfigurationError(f'shape must have three axes, got {shape}')
    return tuple(int(s) for s in shape)


def _ellipsoid(grid: np.ndarray, center: np.ndarray, semi_axes: np.ndarray, rotation: Rotation) -> np.ndarray:
    local = (grid - center) @ rotation.as_matrix()
    return np.sum((local / semi_axes) ** 2, axis=-1) <= 1.0


def synthesize_volume(shape: Sequence[int], rng: np.random.Generator, noise_sigma: float = 0.1) -> SyntheticVolume:
    """One ellipsoidal body with 1-3 attached lobes in a biased, noisy background.

    Geometry works in coordinates normalized to [0, 1] per axis, so semi-axes
    are fractions of the volume extent.
    """
    axes = [(np.arange(n) + 0.5) / n for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)

    semi_axes = rng.uniform(*SEMI_AXIS_RANGE, size=3)
    body_fraction = 4 / 3 * math.pi * np.prod(semi_axes)
    if body_fraction > MAX_BODY_FRACTION:
        semi_axes *= (MAX_BODY_FRACTION / body_fraction) ** (1 / 3)

    center = rng.uniform(0.4, 0.6, size=3)
    rotation = Rotation.random(None, rng)
    label = _ellipsoid(grid, center, semi_axes, rotation)

    for _ in range(rng.integers(1, 4)):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        anchor = center + rotation.apply(semi_axes * direction)
        lobe_axes = rng.uniform(*LOBE_SCALE_RANGE, size=3) * semi_axes
        label |= _ellipsoid(grid, anchor, lobe_axes, Rotation.random(None, rng))

    # smooth bias: three low-frequency plane waves bounded by BIAS_AMPLITUDE
    bias = np.zeros(shape)
    for _ in range(3):
        frequency = rng.uniform(-1.0, 1.0, size=3)
        phase = rng.uniform(0, 2 * math.pi)
        weight = rng.uniform(-1.0, 1.0) / 3
        bias += weight * np.cos(2 * math.pi * grid @ frequency + phase)
    bias *= BIAS_AMPLITUDE

    clean = BACKGROUND_LEVEL + (FOREGROUND_LEVEL - BACKGROUND_LEVEL) * label + bias
    intensity = clean + rng.normal(0.0, noise_sigma, size=shape)

    return SyntheticVolume(intensity.astype(np.float32), label.astype(np.uint8), clean.astype(np.float32))


def generate_synthetic(
    n_volumes: int,
    shape: int | Sequence[int],
    seed: int,
    out_dir: Path,
    noise_sigma: float = 0.1,
    labeled_fraction: float = 0.2,
    test_fraction: float = 0.2
) -> DatasetManifest:
    shape = _as_shape(shape)
    if any(s < MIN_EXTENT for s in shape):
        raise ConfigurationError(f'every axis must be >= {MIN_EXTENT}, got {shape}')
    if noise_sigma < 0:
        raise ConfigurationError(f'noise_sigma must be non-negative, got {noise_sigma}')

    n_test = max(1, round(n_volumes * test_fraction))
    n_train = n_volumes - n_test
    if n_train < 1:
        raise ConfigurationError(f'{n_volumes} volumes leave no training data')
    n_labeled = min(n_train, max(1, round(n_train * labeled_fraction)))

    out_dir = Path(out_dir)
    (out_dir / 'volumes').mkdir(parents=True, exist_ok=True)

    samples = []
    for index in range(n_volumes):
        sample_id = f'case_{index:04d}'
        volume = synthesize_volume(shape, np.random.default_rng([seed, index]), noise_sigma)

        intensity_path = f'volumes/{sample_id}_intensity.f32'
        label_path = f'volumes/{sample_id}_label.u8'
        volume.intensity.astype('<f4').tofile(out_dir / intensity_path)
        volume.label.astype(np.uint8).tofile(out_dir / label_path)

        samples.append(SampleEntry(id=sample_id, intensity_path=intensity_path, label_path=label_path, shape=shape))

    ids = [s.id for s in samples]
    manifest = DatasetManifest(samples=samples, splits={
        SplitName.TRAIN_LABELED: ids[:n_labeled],
        SplitName.TRAIN_UNLABELED: ids[n_labeled:n_train],
        SplitName.TEST: ids[n_train:],
    })
    save_manifest(manifest, out_dir / MANIFEST_NAME)

    logger.info('generated %d volumes of shape %s in %s (seed %d)', n_volumes, shape, out_dir, seed)
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding='utf-8')
    return path


def load_manifest(path: Path) -> DatasetManifest:
    try:
        return DatasetManifest.model_validate_json(Path(path).read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise DataError(f'manifest not found: {path}')
    except ValidationError as e:
        raise DataError(f'invalid manifest {path}: {e}')


def load_sample(manifest: DatasetManifest, root: Path, sample_id: str) -> VolumeSample:
    entry = manifest.sample(sample_id)
    root = Path(root)
    n = math.prod(entry.shape)

    def read(relative: str, dtype: str) -> np.ndarray:
        try:
            values = np.fromfile(root / relative, dtype=dtype)
        except FileNotFoundError:
            raise DataError(f'volume file not found: {root / relative}')
        if values.size != n:
            raise DataError(f'{root / relative} holds {values.size} values, manifest shape {entry.shape} needs {n}')
        return values.reshape(entry.shape)

    label = read(entry.label_path, 'u1') if entry.label_path else None
    return VolumeSample(id=entry.id, intensity=read(entry.intensity_path, '<f4'), label=label, spacing=entry.spacing)


def normalize(sample: VolumeSample) -> VolumeSample:
    values = sample.intensity.astype(np.float64)
    std = values.std()
    if not std > 0:
        raise NormalizationError(f'sample {sample.id} has zero intensity variance', sample.id)

    standardized = ((values - values.mean()) / std).astype(np.float32)
    return sample.model_copy(update={'intensity': standardized})


def random_crop(sample: VolumeSample, crop_dims: Sequence[int], rng: np.random.Generator) -> VolumeSample:
    shape = sample.intensity.shape
    if any(c > s for c, s in zip(crop_dims, shape)):
        raise ShapeError(f'crop {tuple(crop_dims)} exceeds volume {shape}', shape=shape)

    corner = [int(rng.integers(0, s - c + 1)) for s, c in zip(shape, crop_dims)]
    region = tuple(slice(o, o + c) for o, c in zip(corner, crop_dims))

    return sample.model_copy(update={
        'intensity': sample.intensity[region].copy(),
        'label': sample.label[region].copy() if sample.label is not None else None,
    })


def sample_transform(rng: np.random.Generator, shape: Sequence[int]) -> Transform:
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    rotations = int(rng.integers(0, 4))
    if shape[1] != shape[2]:
        # quarter turns would swap the axial extents
        rotations -= rotations % 2
    return Transform(flips, rotations)


def apply_transform(array: np.ndarray, transform: Transform) -> np.ndarray:
    for axis, flip in enumerate(transform.flips):
        if flip:
            array = np.flip(array, axis=axis)
    return np.ascontiguousarray(np.rot90(array, transform.rotations, axes=(1, 2)))


def augment(sample: VolumeSample, rng: np.random.Generator) -> VolumeSample:
    transform = sample_transform(rng, sample.intensity.shape)
    return sample.model_copy(update={
        'intensity': apply_transform(sample.intensity, transform),
        'label': apply_transform(sample.label, transform) if sample.label is not None else None,
    })


class BatchComposer:
    """Draws labeled/unlabeled batches from epoch-style shuffles of the training splits."""

    def __init__(
        self,
        manifest: DatasetManifest,
        root: Path,
        cfg: TrainConfig,
        rng: Optional[np.random.Generator] = None
    ):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.labeled_ids = manifest.split(SplitName.TRAIN_LABELED)
        self.unlabeled_ids = manifest.split(SplitName.TRAIN_UNLABELED)

        if len(self.labeled_ids) < cfg.labeled_per_batch:
            raise DataError(
                f'{len(self.labeled_ids)} labeled samples, batch needs {cfg.labeled_per_batch}'
            )
        if len(self.unlabeled_ids) < cfg.unlabeled_per_batch:
            raise DataError(
                f'{len(self.unlabeled_ids)} unlabeled samples, batch needs {cfg.unlabeled_per_batch}'
            )

        needed = self.labeled_ids + (self.unlabeled_ids if cfg.unlabeled_per_batch else [])
        self.samples = {i: normalize(load_sample(manifest, root, i)) for i in needed}
        self._queues: dict[SplitName, list[str]] = {SplitName.TRAIN_LABELED: [], SplitName.TRAIN_UNLABELED: []}

    def _draw(self, split: SplitName, ids: list[str], n: int) -> list[str]:
        queue = self._queues[split]
        drawn: list[str] = []
        while len(drawn) < n:
            if not queue:
                queue.extend(str(i) for i in self.rng.permutation(ids))
            candidate = queue.pop(0)
            if candidate in drawn:
                # epoch boundary inside a batch, keep the batch free of repeats
                queue.append(candidate)
                continue
            drawn.append(candidate)
        return drawn

    def _prepare(self, sample: VolumeSample) -> VolumeSample:
        sample = random_crop(sample, self.cfg.crop, self.rng)
        return augment(sample, self.rng) if self.cfg.augment else sample

    def next_batch(self) -> tuple[list[VolumeSample], list[VolumeSample]]:
        labeled = self._draw(SplitName.TRAIN_LABELED, self.labeled_ids, self.cfg.labeled_per_batch)
        unlabeled = self._draw(SplitName.TRAIN_UNLABELED, self.unlabeled_ids, self.cfg.unlabeled_per_batch)

        return (
            [self._prepare(self.samples[i]) for i in labeled],
            [self._prepare(self.samples[i]).model_copy(update={'label': None}) for i in unlabeled],
        )


def compose_batch(
    manifest: DatasetManifest,
    root: Path,
    cfg: TrainConfig,
    rng: np.random.Generator
) -> tuple[list[VolumeSample], list[VolumeSample]]:
    return BatchComposer(manifest, root, cfg, rng).next_batch()
