# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Run configuration: config/model_defaults.yaml with an optional user file
deep-merged over it (see CONFIG.example.yaml for the keys).

Environment (.env is honoured by the CLI via python-dotenv):
    TC_OUTPUT_DIR   default output directory for `train` and `split`
"""
import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from shared.errors import InvalidConfig
from shared.model import VARIANTS, ModelConfig
from shared.trainer import TrainSchedule

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = Path(__file__).parent.parent / 'config' / 'model_defaults.yaml'
DEFAULT_OUTPUT_DIR = Path('./runs')
# Same 3000/5000 proportion as the default schedule
DECAY_FRACTION = 0.6


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_yaml(path: Path) -> Dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        raise InvalidConfig(f"cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise InvalidConfig(f"{path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path} must hold a mapping at the top level")
    return data


class RunConfig:
    """Loads the merged configuration and hands out typed sections"""

    def __init__(self, config_path: Optional[Path] = None, defaults_path: Optional[Path] = None):
        """Initialize configuration loader

        Args:
            config_path: optional user YAML merged over the defaults
            defaults_path: defaults file, config/model_defaults.yaml if None
        """
        self.defaults_path = defaults_path or DEFAULT_CONFIG_FILE
        self.config_path = config_path
        self.config = _read_yaml(self.defaults_path)
        if config_path is not None:
            self.config = _deep_merge(self.config, _read_yaml(config_path))
            logger.debug(f"Merged configuration from {config_path}")

    @property
    def variant(self) -> str:
        return self.config.get('model', {}).get('variant', 'fcnn')

    def model_config(self, variant: Optional[str] = None) -> ModelConfig:
        """ModelConfig for `variant` (default: model.variant)"""
        variant = variant or self.variant
        if variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}, got {variant!r}")
        section = self.config.get('model', {})
        layers = section.get(variant, {}) or {}
        data = {
            'variant': variant,
            'seed': section.get('seed', 0),
            'zero_init_output': section.get('zero_init_output', True),
            'head': layers.get('head', [64]),
        }
        if variant == 'fcnn':
            data['backbone'] = layers.get('backbone', [256, 128])
        else:
            data['conv'] = layers.get('conv', [])
            data['dense'] = layers.get('dense', [128])
        return ModelConfig.from_dict(data)

    def schedule(self, variant: Optional[str] = None, **overrides) -> TrainSchedule:
        """TrainSchedule for `variant`; keyword overrides (None = keep) win over the file.

        Overriding the epochs without a decay epoch moves the decay to the same
        fraction of the shorter stage.
        """
        variant = variant or self.variant
        section = dict(self.config.get('schedule', {}))
        batch_size = section.pop('batch_size', None)
        if isinstance(batch_size, dict):
            batch_size = batch_size.get(variant)
        section['batch_size'] = batch_size

        overrides = {k: v for k, v in overrides.items() if v is not None}
        section.update(overrides)
        if 'decay_epoch' not in overrides and ({'stage1_epochs', 'stage2_epochs'} & overrides.keys()):
            shortest = min(int(section['stage1_epochs']), int(section['stage2_epochs']))
            if section.get('decay_epoch', 0) >= shortest:
                section['decay_epoch'] = max(1, int(round(shortest * DECAY_FRACTION)))
                logger.info(f"Decay epoch moved to {section['decay_epoch']} for {shortest}-epoch stages")
        if 'splits' in section:
            section['splits'] = tuple(int(s) for s in section['splits'])
        try:
            return TrainSchedule(**section)
        except (TypeError, ValueError) as e:
            raise InvalidConfig(f"schedule section: {e}") from e


def default_output_dir() -> Path:
    return Path(os.getenv('TC_OUTPUT_DIR', str(DEFAULT_OUTPUT_DIR)))
