import json
import os
from dataclasses import dataclass, field, fields, asdict
from typing import Optional

import yaml

from common.utils import get_logger
from errors import ConfigError
from hatnet_model import TilingConfig, ModelConfig, TOY_ENCODER
from synthetic import SyntheticSpec
from trainer import TrainConfig

ROOT_KEY = 'Config'
SECTIONS = {
    'tiling': TilingConfig,
    'model': ModelConfig,
    'train': TrainConfig,
    'synthetic': SyntheticSpec,
}
SCALARS = ('data', 'out', 'seed')

log = get_logger('HATNet Config')


@dataclass
class RunConfig:
    tiling: TilingConfig = field(default_factory=TilingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.tiling.validate()
        if self.model.encoder == TOY_ENCODER:
            self.tiling.check_grid()
        self.model.validate(self.tiling.d)
        self.train.validate()
        self.synthetic.validate()
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError('seed', f'must be a non-negative integer, got {self.seed!r}')
        for key in ('data', 'out'):
            value = getattr(self, key)
            if value is not None and not isinstance(value, str):
                raise ConfigError(key, f'must be a path, got {value!r}')

    @property
    def psi(self):
        return self.model.psi

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        save_config(self, path)


def _build_section(name, cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(name, f'section must be a mapping, got {type(data).__name__}')
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f'{name}.{key}', 'unknown key')
    try:
        return cls(**data)
    except ConfigError as e:
        raise ConfigError(f'{name}.{e.key}', e.detail) from e


def from_dict(data):
    """
    Build and validate a RunConfig from nested dicts, missing values take defaults
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(ROOT_KEY, f'configuration must be a mapping, got {type(data).__name__}')
    if ROOT_KEY in data:
        if len(data) != 1:
            raise ConfigError(ROOT_KEY, f'"{ROOT_KEY}" must be the only top-level key')
        data = data[ROOT_KEY] or {}
    for key in data:
        if key not in SECTIONS and key not in SCALARS:
            raise ConfigError(key, 'unknown key')
    sections = {name: _build_section(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    scalars = {key: data[key] for key in SCALARS if key in data}
    return RunConfig(**sections, **scalars)


def parse_config(config_file=None, args=None):
    """
    Read a YAML or JSON configuration file and apply command line overrides
    :param config_file: path, defaults are used when None
    :param args: argparse Namespace, values that are None (or False for flags) are ignored
    :return: validated RunConfig
    """
    data = {}
    if config_file:
        if not os.path.isfile(config_file):
            raise ConfigError('config', f'"{config_file}" is not a file!')
        log.info(f'Reading configuration from {config_file}')
        with open(config_file) as c_file:
            try:
                # YAML 1.1 reads JSON exponent floats such as 1e-07 as strings
                data = json.load(c_file) if config_file.endswith('.json') else yaml.safe_load(c_file)
            except (yaml.YAMLError, json.JSONDecodeError) as e:
                raise ConfigError('config', f'cannot parse "{config_file}": {e}')
    config = from_dict(data)
    if args is not None:
        config = _override(config, args)
    return config


def _override(config, args):
    data = config.to_dict()
    overrides = vars(args)
    for key in SCALARS:
        value = overrides.get(key)
        if value is not None:
            data[key] = value
    if overrides.get('seed') is not None:
        data['train']['seed'] = overrides['seed']
        data['synthetic']['seed'] = overrides['seed']
    if overrides.get('psi'):
        data['model']['psi'] = overrides['psi']
    if overrides.get('epochs') is not None:
        data['train']['epochs_phase1'] = overrides['epochs']
        data['train']['epochs_phase2'] = 0
    if overrides.get('no_augment'):
        data['train']['augment'] = False
    return from_dict(data)


def save_config(config, path):
    """
    Write a RunConfig as JSON, readable again by parse_config
    """
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'w') as c_file:
        json.dump({ROOT_KEY: config.to_dict()}, c_file, indent=2, sort_keys=True)
