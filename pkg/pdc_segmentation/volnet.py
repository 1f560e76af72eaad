"""Dual-head 3D encoder-decoder segmentation network.

A V-Net style feature extractor feeds two structurally identical, independently
initialized classifier heads. Parameters are exposed through a ParameterStore
that tags every tensor with the group it belongs to (extractor, head1, head2).
"""
import copy
import itertools
import logging
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import nn

from pdc_segmentation.errors import PairingError, ShapeError
from pdc_segmentation.model import Group, NetworkConfig, NormType

logger = logging.getLogger(__name__)

FOREGROUND = 1


def _norm(kind: NormType, channels: int) -> nn.Module:
    match kind:
        case NormType.BATCH:
            return nn.BatchNorm3d(channels)
        case NormType.INSTANCE:
            return nn.InstanceNorm3d(channels, affine=True)


class ConvBlock(nn.Module):

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, norm: NormType):
        super().__init__()
        padding = kernel_size // 2
        self.block = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, kernel_size, padding=padding),
            _norm(norm, out_channels),
            nn.ReLU(),
            nn.Conv3d(out_channels, out_channels, kernel_size, padding=padding),
            _norm(norm, out_channels),
            nn.ReLU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class FeatureExtractor(nn.Module):

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        channels = cfg.encoder_channels

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        in_channels = cfg.in_channels
        for level, out_channels in enumerate(channels):
            self.encoders.append(ConvBlock(in_channels, out_channels, cfg.kernel_size, cfg.norm))
            if level < len(channels) - 1:
                self.downs.append(nn.Sequential(
                    nn.Conv3d(out_channels, out_channels, kernel_size=2, stride=2),
                    _norm(cfg.norm, out_channels),
                    nn.ReLU(),
                ))
            in_channels = out_channels

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(len(channels) - 1)):
            self.ups.append(nn.Sequential(
                nn.ConvTranspose3d(channels[level + 1], channels[level], kernel_size=2, stride=2),
                _norm(cfg.norm, channels[level]),
                nn.ReLU(),
            ))
            self.decoders.append(ConvBlock(2 * channels[level], channels[level], cfg.kernel_size, cfg.norm))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for level, encoder in enumerate(self.encoders):
            x = encoder(x)
            if level < len(self.downs):
                skips.append(x)
                x = self.downs[level](x)

        for up, decoder in zip(self.ups, self.decoders):
            x = decoder(torch.cat([up(x), skips.pop()], dim=1))

        return x


class ClassifierHead(nn.Module):
    # no normalization layers, every tensor takes part in head pairing

    def __init__(self, in_channels: int, hidden_channels: int, num_classes: int, kernel_size: int):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, hidden_channels, kernel_size, padding=kernel_size // 2)
        self.classifier = nn.Conv3d(hidden_channels, num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(F.relu(self.conv(x)))


class DualHeadVNet(nn.Module):

    def __init__(self, extractor: FeatureExtractor, head1: ClassifierHead, head2: ClassifierHead):
        super().__init__()
        self.extractor = extractor
        self.head1 = head1
        self.head2 = head2

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.extractor(x)
        return self.head1(features), self.head2(features)


class ParameterEntry(NamedTuple):
    name: str
    group: Group
    tensor: torch.Tensor


class ParameterStore:
    """Named parameter tensors of a DualHeadVNet, partitioned into extractor, head1 and head2."""

    def __init__(self, network: DualHeadVNet, config: NetworkConfig):
        self.network = network
        self.config = config
        self._check_partition()

    def entries(self) -> list[ParameterEntry]:
        return [ParameterEntry(name, _group_of(name), p) for name, p in self.network.named_parameters()]

    def buffers(self) -> list[ParameterEntry]:
        return [ParameterEntry(name, _group_of(name), b) for name, b in self.network.named_buffers()]

    def group(self, group: Group) -> list[torch.Tensor]:
        return [e.tensor for e in self.entries() if e.group == group]

    def named_group(self, group: Group) -> list[ParameterEntry]:
        return [e for e in self.entries() if e.group == group]

    def head_pairs(self) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        return self.group(Group.HEAD1), self.group(Group.HEAD2)

    def count(self, group: Optional[Group] = None) -> int:
        return sum(e.tensor.numel() for e in self.entries() if group is None or e.group == group)

    @property
    def training(self) -> bool:
        return self.network.training

    @property
    def dtype(self) -> torch.dtype:
        return next(self.network.parameters()).dtype

    def train(self, mode: bool = True) -> 'ParameterStore':
        self.network.train(mode)
        return self

    def eval(self) -> 'ParameterStore':
        return self.train(False)

    def to(self, dtype: torch.dtype) -> 'ParameterStore':
        self.network.to(dtype)
        return self

    def clone(self) -> 'ParameterStore':
        return ParameterStore(copy.deepcopy(self.network), self.config.model_copy(deep=True))

    def snapshot(self) -> dict[str, torch.Tensor]:
        """Detached copies of every parameter and buffer, keyed by name."""
        state = {name: t.detach().clone() for name, t in self.network.named_parameters()}
        state.update({name: t.detach().clone() for name, t in self.network.named_buffers()})
        return state

    def _check_partition(self) -> None:
        names = [name for name, _ in self.network.named_parameters()]
        if len(set(names)) != len(names):
            raise PairingError('parameter names are not unique')

        head1 = [tuple(t.shape) for t in self.group(Group.HEAD1)]
        head2 = [tuple(t.shape) for t in self.group(Group.HEAD2)]
        if head1 != head2:
            raise PairingError(f'head shapes differ: {head1} vs {head2}')


class DualPrediction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits1: torch.Tensor
    logits2: torch.Tensor
    probs1: torch.Tensor
    probs2: torch.Tensor

    @classmethod
    def from_logits(cls, logits1: torch.Tensor, logits2: torch.Tensor) -> 'DualPrediction':
        class_dim = logits1.dim() - 4
        return cls(
            logits1=logits1,
            logits2=logits2,
            probs1=torch.softmax(logits1, dim=class_dim),
            probs2=torch.softmax(logits2, dim=class_dim),
        )

    @property
    def class_dim(self) -> int:
        # (C, D, H, W) or (B, C, D, H, W)
        return self.logits1.dim() - 4


def _group_of(name: str) -> Group:
    return Group(name.split('.', 1)[0])


def _seeded(seed: int, factory: Callable[[], nn.Module]) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_network(cfg: NetworkConfig) -> ParameterStore:
    # independent streams so the heads start from different points
    extractor_seed, head1_seed, head2_seed = (int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(3))
    features = cfg.encoder_channels[0]

    def head() -> ClassifierHead:
        return ClassifierHead(features, cfg.hidden_channels, cfg.num_classes, cfg.kernel_size)

    network = DualHeadVNet(
        _seeded(extractor_seed, lambda: FeatureExtractor(cfg)),
        _seeded(head1_seed, head),
        _seeded(head2_seed, head),
    )
    params = ParameterStore(network, cfg)

    logger.debug(
        'built network: levels=%d, extractor=%d, head1=%d, head2=%d parameters',
        cfg.levels, params.count(Group.EXTRACTOR), params.count(Group.HEAD1), params.count(Group.HEAD2)
    )
    return params


def forward(params: ParameterStore, volume: torch.Tensor | np.ndarray) -> DualPrediction:
    x = torch.as_tensor(volume)
    unbatched = x.dim() == 4
    if unbatched:
        x = x.unsqueeze(0)

    if x.dim() != 5 or x.shape[1] != params.config.in_channels:
        raise ShapeError(
            f'expected input (in_channels={params.config.in_channels}, D, H, W), got {tuple(volume.shape)}',
            shape=tuple(volume.shape)
        )

    spatial = tuple(x.shape[-3:])
    divisor = params.config.divisor
    if any(size % divisor for size in spatial):
        raise ShapeError(f'spatial size {spatial} must be divisible by {divisor}', shape=spatial, divisor=divisor)

    logits1, logits2 = params.network(x.to(params.dtype))
    if unbatched:
        logits1, logits2 = logits1.squeeze(0), logits2.squeeze(0)

    return DualPrediction.from_logits(logits1, logits2)


def sliding_window_positions(
    shape: Sequence[int],
    window: Sequence[int],
    stride: Sequence[int]
) -> list[tuple[int, ...]]:
    """Window corners covering the volume; the last window per axis is snapped to the far edge."""
    axes = []
    for size, w, s in zip(shape, window, stride):
        starts = list(range(0, size - w + 1, s))
        if starts[-1] + w < size:
            starts.append(size - w)
        axes.append(starts)

    return list(itertools.product(*axes))


def infer_mask(
    params: ParameterStore,
    volume: np.ndarray,
    window: Sequence[int],
    stride: Sequence[int]
) -> np.ndarray:
    array = np.asarray(volume, dtype=np.float32)
    if array.ndim == 3:
        array = array[np.newaxis]

    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    divisor = params.config.divisor
    if any(w % divisor for w in window):
        raise ShapeError(f'window {window} must be divisible by {divisor}', shape=window, divisor=divisor)
    if any(s < 1 or s > w for s, w in zip(stride, window)):
        raise ShapeError(f'stride {stride} must be in [1, window] per axis, window {window}', shape=stride)

    spatial = array.shape[1:]
    padding = []
    for size, w in zip(spatial, window):
        missing = max(w - size, 0)
        padding.append((missing // 2, missing - missing // 2))
    padded = np.pad(array, [(0, 0)] + padding, mode='edge')

    positions = sliding_window_positions(padded.shape[1:], window, stride)
    probs = np.zeros((params.config.num_classes, *padded.shape[1:]), dtype=np.float64)
    counts = np.zeros(padded.shape[1:], dtype=np.float64)

    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            for corner in positions:
                region = tuple(slice(c, c + w) for c, w in zip(corner, window))
                patch = torch.from_numpy(np.ascontiguousarray(padded[(slice(None), *region)]))
                pred = forward(params, patch)
                fused = (pred.probs1 + pred.probs2) / 2
                probs[(slice(None), *region)] += fused.double().numpy()
                counts[region] += 1
    finally:
        params.train(was_training)

    logger.debug('inferred %d windows over volume %s', len(positions), spatial)

    probs /= counts
    crop = tuple(slice(before, before + size) for (before, _), size in zip(padding, spatial))
    return (probs.argmax(axis=0)[crop] == FOREGROUND).astype(np.uint8)
