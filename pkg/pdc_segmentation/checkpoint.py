"""Binary checkpoint container.

Layout, all integers little-endian:

    magic 'PDCK' | format version u32 | header length u32 | header (UTF-8 JSON)
    entry count u32
    per entry: name length u16 | name | group length u8 | group | kind u8
               | ndim u8 | dims u32 * ndim | values float32 * prod(dims)

The header echoes the network config, the optional train config and the
iteration counter. kind is 0 for parameters and 1 for buffers (normalization
running statistics).
"""
import json
import logging
import math
import struct
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict

from pdc_segmentation.errors import CheckpointError
from pdc_segmentation.model import Group, NetworkConfig, TrainConfig
from pdc_segmentation.volnet import ParameterStore, build_network

logger = logging.getLogger(__name__)

MAGIC = b'PDCK'
FORMAT_VERSION = 1

PARAMETER = 0
BUFFER = 1


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParameterStore
    iteration: int
    train_config: Optional[TrainConfig] = None


def checkpoint_name(iteration: int) -> str:
    return f'ckpt_{iteration}.bin'


def save_checkpoint(
    path: Path,
    params: ParameterStore,
    iteration: int,
    train_config: Optional[TrainConfig] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header = json.dumps({
        'format_version': FORMAT_VERSION,
        'iteration': iteration,
        'network': params.config.model_dump(mode='json'),
        'train': train_config.model_dump(mode='json') if train_config else None,
    }, sort_keys=True, separators=(',', ':')).encode('utf-8')

    entries = [(e, PARAMETER) for e in params.entries()] + [(e, BUFFER) for e in params.buffers()]

    with open(path, 'wb') as file:
        file.write(MAGIC)
        file.write(struct.pack('<II', FORMAT_VERSION, len(header)))
        file.write(header)
        file.write(struct.pack('<I', len(entries)))

        for entry, kind in entries:
            name = entry.name.encode('utf-8')
            group = entry.group.value.encode('utf-8')
            shape = tuple(entry.tensor.shape)
            file.write(struct.pack('<H', len(name)))
            file.write(name)
            file.write(struct.pack('<B', len(group)))
            file.write(group)
            file.write(struct.pack('<BB', kind, len(shape)))
            file.write(struct.pack(f'<{len(shape)}I', *shape))
            file.write(entry.tensor.detach().cpu().numpy().astype('<f4').tobytes())

    logger.info('saved checkpoint: %s (iteration %d)', path, iteration)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        with open(path, 'rb') as file:
            return _read_checkpoint(file)
    except FileNotFoundError:
        raise CheckpointError(f'checkpoint not found: {path}')
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as e:
        raise CheckpointError(f'malformed checkpoint {path}: {e}')


def _read_checkpoint(file: BinaryIO) -> Checkpoint:
    if file.read(4) != MAGIC:
        raise CheckpointError('not a checkpoint container (bad magic)')

    version, header_len = struct.unpack('<II', file.read(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f'unsupported checkpoint format version {version}')

    header = json.loads(file.read(header_len).decode('utf-8'))
    network_cfg = NetworkConfig.model_validate(header['network'])
    train_cfg = TrainConfig.model_validate(header['train']) if header['train'] else None

    params = build_network(network_cfg)
    targets = dict(params.network.named_parameters())
    targets.update(params.network.named_buffers())

    (count,) = struct.unpack('<I', file.read(4))
    loaded = set()
    for _ in range(count):
        (name_len,) = struct.unpack('<H', file.read(2))
        name = file.read(name_len).decode('utf-8')
        (group_len,) = struct.unpack('<B', file.read(1))
        group = Group(file.read(group_len).decode('utf-8'))
        kind, ndim = struct.unpack('<BB', file.read(2))
        shape = struct.unpack(f'<{ndim}I', file.read(4 * ndim))
        n = math.prod(shape)
        values = np.frombuffer(file.read(4 * n), dtype='<f4', count=n).reshape(shape)

        target = targets.get(name)
        if target is None or kind not in (PARAMETER, BUFFER) or not name.startswith(f'{group.value}.'):
            raise CheckpointError(f'unexpected entry {name} ({group.value})')
        if tuple(target.shape) != shape:
            raise CheckpointError(f'entry {name} has shape {shape}, network expects {tuple(target.shape)}')

        with torch.no_grad():
            target.copy_(torch.from_numpy(values.copy()).to(target.dtype))
        loaded.add(name)

    missing = set(targets) - loaded
    if missing:
        raise CheckpointError(f'checkpoint is missing entries: {sorted(missing)}')

    return Checkpoint(params=params, iteration=header['iteration'], train_config=train_cfg)
