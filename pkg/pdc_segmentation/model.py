import math
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from pdc_segmentation.errors import ConfigurationError, DataError


class Group(str, Enum):
    EXTRACTOR = 'extractor'
    HEAD1 = 'head1'
    HEAD2 = 'head2'


ALL_GROUPS = frozenset(Group)
HEAD_GROUPS = frozenset({Group.HEAD1, Group.HEAD2})


class Variant(str, Enum):
    SUPERVISED_ONLY = 'supervised_only'
    VNET_GC = 'vnet_gc'
    VNET_EC = 'vnet_ec'
    PDC = 'pdc'


DUAL_HEAD_VARIANTS = frozenset({Variant.VNET_GC, Variant.VNET_EC, Variant.PDC})


class Phase(str, Enum):
    SUPERVISED = 'supervised'
    DECOUPLING = 'decoupling'
    CONSISTENCY = 'consistency'
    JOINT = 'joint'


class NormType(str, Enum):
    BATCH = 'batch'
    INSTANCE = 'instance'


class PercentileMethod(str, Enum):
    LINEAR = 'linear'
    NEAREST_RANK = 'nearest_rank'


def parse_variant(value: Any) -> Variant:
    if isinstance(value, Variant):
        return value

    try:
        return Variant(value)
    except ValueError:
        valid = ', '.join(v.value for v in Variant)
        raise ConfigurationError(f'unknown variant {value!r}, valid variants: {valid}')


# Network

class NetworkConfig(BaseModel):
    in_channels: int = 1
    num_classes: int = 2
    encoder_channels: list[int] = [8, 16, 32]
    head_hidden_channels: Optional[int] = None
    kernel_size: int = 3
    norm: NormType = NormType.BATCH
    seed: int = 0

    @model_validator(mode='after')
    def _check_invariants(self) -> 'NetworkConfig':
        if not self.encoder_channels or any(c <= 0 for c in self.encoder_channels):
            raise ConfigurationError(f'encoder_channels must be non-empty and positive, got {self.encoder_channels}')
        if self.in_channels < 1:
            raise ConfigurationError(f'in_channels must be >= 1, got {self.in_channels}')
        if self.num_classes < 2:
            raise ConfigurationError(f'num_classes must be >= 2, got {self.num_classes}')
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f'kernel_size must be odd, got {self.kernel_size}')
        if self.head_hidden_channels is not None and self.head_hidden_channels < 1:
            raise ConfigurationError(f'head_hidden_channels must be >= 1, got {self.head_hidden_channels}')
        if self.seed < 0:
            raise ConfigurationError(f'seed must be unsigned, got {self.seed}')
        return self

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def hidden_channels(self) -> int:
        # the decoder ends at the first level's width
        return self.head_hidden_channels or self.encoder_channels[0]


# Training

DEFAULT_PHASE_ORDER = (Phase.SUPERVISED, Phase.DECOUPLING, Phase.CONSISTENCY)


class TrainConfig(BaseModel):
    variant: Variant = Variant.PDC
    total_iterations: int = 6000
    base_lr: float = 0.01
    lr_decay_every: int = 2500
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    labeled_per_batch: Optional[int] = None
    ramp_t_max: Optional[int] = None
    lambda_c_scale: float = 0.1
    lambda_pd_scale: float = 0.1
    crop: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50
    phase_order: tuple[Phase, ...] = DEFAULT_PHASE_ORDER
    decoupling_every: int = 1
    augment: bool = True

    @field_validator('variant', mode='before')
    @classmethod
    def _parse_variant(cls, value: Any) -> Variant:
        return parse_variant(value)

    @model_validator(mode='after')
    def _check_invariants(self) -> 'TrainConfig':
        if self.total_iterations < 1:
            raise ConfigurationError(f'total_iterations must be >= 1, got {self.total_iterations}')
        if self.batch_size < 1:
            raise ConfigurationError(f'batch_size must be >= 1, got {self.batch_size}')
        if self.base_lr <= 0:
            raise ConfigurationError(f'base_lr must be positive, got {self.base_lr}')
        if self.lr_decay_every < 1:
            raise ConfigurationError(f'lr_decay_every must be >= 1, got {self.lr_decay_every}')
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigurationError(f'lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}')
        if self.lambda_c_scale < 0 or self.lambda_pd_scale < 0:
            raise ConfigurationError('lambda scales must be non-negative')

        if self.labeled_per_batch is None:
            if self.variant == Variant.SUPERVISED_ONLY:
                self.labeled_per_batch = self.batch_size
            else:
                self.labeled_per_batch = max(1, self.batch_size // 2)

        if not 1 <= self.labeled_per_batch <= self.batch_size:
            raise ConfigurationError(
                f'labeled_per_batch must be in [1, {self.batch_size}], got {self.labeled_per_batch}'
            )
        if self.variant in DUAL_HEAD_VARIANTS and self.labeled_per_batch >= self.batch_size:
            raise ConfigurationError(f'{self.variant.value} needs unlabeled samples in every batch')

        if self.ramp_t_max is None:
            self.ramp_t_max = self.total_iterations
        if self.ramp_t_max <= 0:
            raise ConfigurationError(f'ramp_t_max must be positive, got {self.ramp_t_max}')

        if sorted(p.value for p in self.phase_order) != sorted(p.value for p in DEFAULT_PHASE_ORDER):
            raise ConfigurationError(f'phase_order must be a permutation of {[p.value for p in DEFAULT_PHASE_ORDER]}')
        if self.decoupling_every < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigurationError('decoupling_every, checkpoint_every and log_every must be >= 1')
        if any(c < 1 for c in self.crop):
            raise ConfigurationError(f'crop must be positive, got {self.crop}')
        return self

    @property
    def unlabeled_per_batch(self) -> int:
        return self.batch_size - self.labeled_per_batch


class EvalConfig(BaseModel):
    window: tuple[int, int, int] = (32, 32, 32)
    stride: tuple[int, int, int] = (16, 16, 16)
    # None keeps the per-sample spacing from the manifest
    spacing: Optional[tuple[float, float, float]] = None
    percentile: PercentileMethod = PercentileMethod.LINEAR

    @model_validator(mode='after')
    def _check_invariants(self) -> 'EvalConfig':
        if any(s < 1 or s > w for s, w in zip(self.stride, self.window)):
            raise ConfigurationError(f'stride {self.stride} must be in [1, window] per axis, window {self.window}')
        if self.spacing is not None and any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f'spacing must be positive, got {self.spacing}')
        return self


class LossBundle(BaseModel):
    model_config = ConfigDict(allow_inf_nan=False)

    supervised: float = Field(ge=0)
    consistency: float = Field(ge=0)
    decoupling: float = Field(ge=0)
    lambda_c: float = Field(ge=0)
    lambda_pd: float = Field(ge=0)

    @field_validator('decoupling')
    @classmethod
    def _check_decoupling(cls, value: float) -> float:
        # mean of squared cosines, float32 rounding may overshoot 1 slightly
        if value > 1.0 + 1e-5:
            raise ValueError(f'decoupling loss must be in [0, 1], got {value}')
        return value


# Metrics

class CouplingReport(BaseModel):
    cd: float
    qcd: float
    layer_cd: list[float]
    layer_qcd: list[float]


class SurfaceDistances(BaseModel):
    asd: float
    hd95: float


class CaseMetrics(BaseModel):
    case_id: str
    dice: float
    jaccard: float
    asd: Optional[float] = None
    hd95: Optional[float] = None
    flagged: bool = False


class MetricsReport(BaseModel):
    dice: float = Field(ge=0, le=1)
    jaccard: float = Field(ge=0, le=1)
    asd: Optional[float] = Field(default=None, ge=0)
    hd95: Optional[float] = Field(default=None, ge=0)
    cd: float = Field(ge=-1 - 1e-5, le=1 + 1e-5)
    qcd: float = Field(ge=0, le=1 + 1e-5)
    n_cases: int
    spacing: tuple[float, float, float]
    cases: list[CaseMetrics] = []
    flagged_cases: list[str] = []
    config_hash: Optional[str] = None
    checkpoint: Optional[str] = None

    @model_validator(mode='after')
    def _check_overlap(self) -> 'MetricsReport':
        for case in self.cases:
            if case.jaccard > case.dice + 1e-12:
                raise ValueError(f'jaccard exceeds dice for case {case.case_id}')
        return self


# Data

class SplitName(str, Enum):
    TRAIN_LABELED = 'train_labeled'
    TRAIN_UNLABELED = 'train_unlabeled'
    TEST = 'test'


class SampleEntry(BaseModel):
    id: str
    intensity_path: str
    label_path: Optional[str] = None
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


class DatasetManifest(BaseModel):
    version: int = 1
    samples: list[SampleEntry]
    splits: dict[SplitName, list[str]]

    @model_validator(mode='after')
    def _check_splits(self) -> 'DatasetManifest':
        by_id = {s.id: s for s in self.samples}
        if len(by_id) != len(self.samples):
            raise DataError('manifest sample ids are not unique')

        seen: set[str] = set()
        for split, ids in self.splits.items():
            overlap = seen.intersection(ids)
            if overlap or len(set(ids)) != len(ids):
                raise DataError(f'split {split.value} overlaps another split: {sorted(overlap)}')
            seen.update(ids)

            missing = [i for i in ids if i not in by_id]
            if missing:
                raise DataError(f'split {split.value} references unknown samples: {missing}')

            if split in (SplitName.TRAIN_LABELED, SplitName.TEST):
                unlabeled = [i for i in ids if by_id[i].label_path is None]
                if unlabeled:
                    raise DataError(f'split {split.value} contains samples without labels: {unlabeled}')
        return self

    def sample(self, sample_id: str) -> SampleEntry:
        for entry in self.samples:
            if entry.id == sample_id:
                return entry
        raise DataError(f'sample {sample_id} not found in manifest')

    def split(self, name: SplitName) -> list[str]:
        return list(self.splits.get(name, []))


class VolumeSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    intensity: np.ndarray
    label: Optional[np.ndarray] = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @model_validator(mode='after')
    def _check_arrays(self) -> 'VolumeSample':
        if self.intensity.ndim != 3:
            raise DataError(f'sample {self.id}: intensity must be 3D, got shape {self.intensity.shape}')
        if self.label is not None and self.label.shape != self.intensity.shape:
            raise DataError(f'sample {self.id}: label shape {self.label.shape} != intensity {self.intensity.shape}')
        if not np.isfinite(self.intensity).all():
            raise DataError(f'sample {self.id}: intensity contains non-finite values')
        return self


# Experiments

class ExperimentSpec(BaseModel):
    name: str
    manifest: Path
    variants: list[Variant]
    fractions: list[float] = [0.1, 0.2, 0.3]
    seeds: list[int] = [0, 1, 2]
    base: dict[str, Any] = {}
    overrides: dict[Variant, dict[str, Any]] = {}
    network: NetworkConfig = NetworkConfig()
    evaluation: EvalConfig = EvalConfig()
    output_dir: Path = Path('runs')
    upper_bound: bool = False

    @field_validator('variants', mode='before')
    @classmethod
    def _parse_variants(cls, value: Any) -> list[Variant]:
        return [parse_variant(v) for v in value]

    @field_validator('overrides', mode='before')
    @classmethod
    def _parse_override_keys(cls, value: Any) -> dict[Variant, dict[str, Any]]:
        return {parse_variant(k): v for k, v in dict(value).items()}

    @model_validator(mode='after')
    def _check_invariants(self) -> 'ExperimentSpec':
        if not self.variants:
            raise ConfigurationError('variants must not be empty')
        if not self.seeds:
            raise ConfigurationError('seeds must not be empty')
        bad = [f for f in self.fractions if not (0 < f <= 1) or math.isnan(f)]
        if not self.fractions or bad:
            raise ConfigurationError(f'fractions must be in (0, 1], got {self.fractions}')
        return self


class ResultRow(BaseModel):
    variant: Variant
    fraction: float
    n_labeled: int
    n_unlabeled: int
    dice: float
    jaccard: float
    asd: Optional[float] = None
    hd95: Optional[float] = None
    cd: Optional[float] = None
    qcd: Optional[float] = None
    seed: int
    config_hash: str
    checkpoint: str


class DeltaRow(BaseModel):
    fraction: float
    n_seeds: int
    dice_delta_mean: float
    dice_delta_min: float
    dice_delta_max: float
