"""
Configuration module for fogseg.
-------------------------------------------

This module defines the environment-driven settings (paths, log level, debug switch, worker
count) and the validated ``RunConfig`` that every training, fine-tuning and evaluation run
is driven by.

Run configs come from a plain-text sectioned ``key = value`` file::

    [model]
    use_depth = true
    stage_channels = 16, 64, 128

    [train]
    epochs = 100
    batch_size = 8

Sections are only a grouping for humans; keys are flattened into ``RunConfig`` fields and
unknown keys are rejected.
"""

import configparser
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import ConfigError

load_dotenv()

# Base paths
FOGSEG_HOME = Path(os.getenv('FOGSEG_HOME', './runs'))
DATA_DIR = Path(os.getenv('FOGSEG_DATA_DIR', str(FOGSEG_HOME / 'data')))
LOGS_DIR = Path(os.getenv('FOGSEG_LOGS_DIR', str(FOGSEG_HOME / 'logs')))
CKPT_DIR = Path(os.getenv('FOGSEG_CKPT_DIR', str(FOGSEG_HOME / 'checkpoints')))

# Runtime switches
LOG_LEVEL = os.getenv('FOGSEG_LOG_LEVEL', 'INFO').upper()
DEBUG = os.getenv('FOGSEG_DEBUG', '0').lower() in ('1', 'true', 'yes')
WORKERS = int(os.getenv('FOGSEG_WORKERS', 1))
DEFAULT_SEED = int(os.getenv('FOGSEG_SEED', 0))

# Checkpoint naming
LATEST_POINTER = 'latest'
CKPT_SUFFIX = '.ckpt'

# Dataset and model constants
NUM_CLASSES = 19
IGNORE_LABEL = 255
REFERENCE_PARAM_COUNT = 2_400_000
LUMINANCE_COEFFICIENTS = (0.299, 0.587, 0.144)
CLASS_WEIGHT_C = 1.10


def ensure_dirs() -> None:
    """Create the run directories. Called by the CLI, never on import."""
    for directory in [FOGSEG_HOME, DATA_DIR, LOGS_DIR, CKPT_DIR]:
        directory.mkdir(parents=True, exist_ok=True)


def get_config() -> Dict[str, Any]:
    """
    Get the current environment configuration as a dictionary.
    Useful for logging and debugging.
    """
    return {
        'paths': {
            'fogseg_home': str(FOGSEG_HOME),
            'data_dir': str(DATA_DIR),
            'logs_dir': str(LOGS_DIR),
            'checkpoint_dir': str(CKPT_DIR)
        },
        'runtime': {
            'log_level': LOG_LEVEL,
            'debug': DEBUG,
            'workers': WORKERS,
            'default_seed': DEFAULT_SEED
        }
    }

# ----------------------------------------------------------------------------------------------------------


class RunConfig(BaseModel):
    """Validated settings for one run of the four-step protocol."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    # model
    num_classes: int = NUM_CLASSES
    stage_channels: Tuple[int, int, int] = (16, 64, 128)
    rgb_plain_blocks: int = 5
    dilations: Tuple[int, ...] = (2, 4, 8, 16, 2, 4, 8, 16)
    decoder_blocks: int = 2
    dense_growth: int = 12
    dense_layers: int = 4
    dropout_p: float = 0.0
    use_depth: bool = True
    use_domain_adaptation: bool = True

    # data
    height: int = 64
    width: int = 128
    ignore_label: int = IGNORE_LABEL
    luminance_coefficients: Tuple[float, float, float] = LUMINANCE_COEFFICIENTS
    workers: int = WORKERS
    seg_train: Optional[Path] = None
    seg_val: Optional[Path] = None
    da_foggy: Optional[Path] = None
    da_clear: Optional[Path] = None
    ft_foggy: Optional[Path] = None
    ft_clear: Optional[Path] = None

    # optim
    lr: float = 5e-3
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    class_weight_c: float = CLASS_WEIGHT_C
    loss_reduction: Literal['mean', 'sum'] = 'mean'

    # train
    epochs: int = 100
    batch_size: int = 8
    seed: int = DEFAULT_SEED
    augment: bool = True
    out_dir: Path = CKPT_DIR

    # transfer
    generator_loss: Literal['non_saturating', 'literal'] = 'non_saturating'
    lambda_cycle: float = 10.0
    gen_filters: int = 32
    disc_filters: int = 32
    gen_res_blocks: int = 3
    disc_layers: int = 3
    transfer_steps: int = 500
    transfer_batch_size: int = 4
    transfer_height: int = 64
    transfer_width: int = 64
    transfer_lr: float = 2e-4

    # finetune
    finetune_epochs: int = 10
    freeze_generator: bool = False
    luminance_source: Literal['corrected', 'foggy'] = 'corrected'

    @field_validator('stage_channels')
    @classmethod
    def _strictly_increasing(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if not all(c >= 1 for c in value) or not (value[0] < value[1] < value[2]):
            raise ValueError(f"stage_channels must be positive and strictly increasing, got {value}")
        return value

    @field_validator('dilations')
    @classmethod
    def _positive_dilations(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(d < 1 for d in value):
            raise ValueError(f"dilations must be >= 1, got {value}")
        return value

    @field_validator('dropout_p')
    @classmethod
    def _probability(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {value}")
        return value

    @model_validator(mode='after')
    def _check_sizes(self) -> 'RunConfig':
        if self.height % 8 or self.width % 8 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"height/width must be positive multiples of 8, got {self.height}x{self.width}")
        if self.transfer_height % 4 or self.transfer_width % 4:
            raise ValueError("transfer_height/transfer_width must be multiples of 4")
        for name in ('epochs', 'batch_size', 'transfer_steps', 'transfer_batch_size', 'workers',
                     'num_classes', 'gen_filters', 'disc_filters'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.class_weight_c <= 1.0:
            raise ValueError("class_weight_c must be > 1 so that every class weight is finite")
        return self

    def with_overrides(self, **overrides: Any) -> 'RunConfig':
        """Return a validated copy with ``None``-valued overrides ignored."""
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build_run_config(values)

# ----------------------------------------------------------------------------------------------------------


def build_run_config(values: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def _parse_value(raw: str) -> Any:
    # Tuples are written comma separated; pydantic coerces the strings.
    raw = raw.strip()
    if ',' in raw:
        return tuple(part.strip() for part in raw.split(',') if part.strip())
    return raw


def load_run_config(path: Optional[Path] = None, **overrides: Any) -> RunConfig:
    """
    Read a sectioned key=value file into a RunConfig.

    Args:
        path: Config file; ``None`` uses the defaults
        overrides: Field values that win over the file (``None`` values are ignored)

    Raises:
        ConfigError: Missing file, unknown key or failed validation
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=('#', ';'))
        parser.read(path)
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in RunConfig.model_fields:
                    raise ConfigError(f"unknown config key '{key}' in section [{section}]")
                values[key] = _parse_value(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_run_config(values)
