import hashlib
import json
from pathlib import Path
from typing import Any, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

from pdc_segmentation.errors import ConfigurationError
from pdc_segmentation.model import NetworkConfig, TrainConfig


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix='PDC_', env_file='.env', env_file_encoding='utf-8', extra='ignore')
    log_level: str = 'INFO'
    num_threads: int = 1
    deterministic: bool = True
    output_dir: str = 'runs'


# desk is the default scale; full uses the 112x112x80 crop and five-level widths
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    'desk': {
        'network': {'encoder_channels': [8, 16, 32]},
        'train': {'crop': [32, 32, 32]},
        'evaluation': {'window': [32, 32, 32], 'stride': [16, 16, 16]},
    },
    'full': {
        'network': {'encoder_channels': [16, 32, 64, 128, 256]},
        'train': {'crop': [112, 112, 80]},
        'evaluation': {'window': [112, 112, 80], 'stride': [18, 18, 4]},
    },
}


def load_config_file(path: Optional[Path]) -> dict[str, Any]:
    if path is None:
        return {}

    try:
        with open(path, encoding='utf-8') as file:
            values = json.load(file)
    except FileNotFoundError:
        raise ConfigurationError(f'config file not found: {path}')
    except json.JSONDecodeError as e:
        raise ConfigurationError(f'config file {path} is not valid JSON: {e}')

    if not isinstance(values, dict):
        raise ConfigurationError(f'config file {path} must contain a JSON object')

    return values


def merge_config(*layers: Optional[dict[str, Any]]) -> dict[str, Any]:
    """Merge config layers left to right; later layers win and None values are ignored."""
    merged: dict[str, Any] = {}
    for layer in layers:
        if not layer:
            continue
        for key, value in layer.items():
            if value is None:
                continue
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = merge_config(merged[key], value)
            else:
                merged[key] = value
    return merged


def preset(name: str) -> dict[str, dict[str, Any]]:
    if name not in PRESETS:
        raise ConfigurationError(f'unknown preset {name!r}, valid presets: {", ".join(PRESETS)}')
    return PRESETS[name]


def config_hash(network: NetworkConfig, train: TrainConfig, fraction: Optional[float] = None) -> str:
    payload = {
        'network': network.model_dump(mode='json'),
        'train': train.model_dump(mode='json'),
        'fraction': fraction,
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]
