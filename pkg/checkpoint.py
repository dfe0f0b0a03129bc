"""
Checkpoints: a directory holding one HTNT file per parameter and a manifest.json describing them.
"""
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import htnt
from common.utils import get_logger
from errors import FormatError, ShapeError
from hatnet_model import HatnetParams, TilingConfig, ModelConfig

MANIFEST = 'manifest.json'
FORMAT_VERSION = 1
TENSOR_KEYS = ('file', 'dims')
# initialization seed does not matter once the weights are loaded
REBUILD_ONLY_KEYS = ('seed',)

log = get_logger('Checkpoint')


@dataclass
class Checkpoint:
    state: OrderedDict
    val_accuracy: float = 0.0
    epoch: int = 0
    path: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, params, val_accuracy, epoch, path=None):
        return cls(params.state_dict(), float(val_accuracy), int(epoch), path)

    def names(self):
        return list(self.state.keys())


def _file_name(name):
    return name + htnt.EXTENSION


def save_checkpoint(folder, params, val_accuracy=0.0, epoch=0, extra=None):
    """
    Write every named parameter as HTNT plus the manifest
    :return: Checkpoint describing what was written
    """
    os.makedirs(folder, exist_ok=True)
    tensors = OrderedDict()
    for name, tensor in params.named_parameters().items():
        file_name = _file_name(name)
        htnt.save(os.path.join(folder, file_name), tensor)
        tensors[name] = {'file': file_name, 'dims': tensor.dims}
    manifest = {
        'format_version': FORMAT_VERSION,
        'tiling': params.tiling.to_dict(),
        'model': params.model_cfg.to_dict(),
        'psi': params.model_cfg.psi,
        'encoder': params.encoder.describe() if params.encoder is not None else None,
        'val_accuracy': float(val_accuracy),
        'epoch': int(epoch),
        'tensors': tensors,
        'extra': extra or {},
    }
    with open(os.path.join(folder, MANIFEST), 'w') as manifest_file:
        json.dump(manifest, manifest_file, indent=2)
    log.debug(f'Checkpoint of epoch {epoch} saved to {folder}')
    return Checkpoint(params.state_dict(), float(val_accuracy), int(epoch), folder, extra or {})


def read_manifest(folder):
    path = os.path.join(folder, MANIFEST)
    if not os.path.isfile(path):
        raise FormatError(f'"{folder}" is not a checkpoint, {MANIFEST} is missing')
    try:
        with open(path) as manifest_file:
            manifest = json.load(manifest_file)
    except json.JSONDecodeError as e:
        raise FormatError(f'Invalid checkpoint manifest {path}: {e}')
    if not isinstance(manifest, dict):
        raise FormatError(f'Checkpoint manifest {path} is not a JSON object')
    for key in ('tiling', 'model', 'tensors'):
        if not isinstance(manifest.get(key), dict):
            raise FormatError(f'Checkpoint manifest {path} has no "{key}" section')
    for name, entry in manifest['tensors'].items():
        missing = [key for key in TENSOR_KEYS if not isinstance(entry, dict) or key not in entry]
        if missing:
            raise FormatError(f'Checkpoint manifest entry "{name}" is missing {missing}')
    if manifest.get('format_version', FORMAT_VERSION) != FORMAT_VERSION:
        raise FormatError(f'Unsupported checkpoint format version {manifest["format_version"]}')
    return manifest


def load_state(folder, manifest=None):
    manifest = manifest or read_manifest(folder)
    state = OrderedDict()
    for name, entry in manifest['tensors'].items():
        array = htnt.load_array(os.path.join(folder, entry['file']))
        if list(array.shape) != list(entry['dims']):
            raise ShapeError(f'checkpoint tensor {name} does not match its manifest', array.shape, entry['dims'])
        state[name] = array
    return state


def _section(manifest, key, cls):
    try:
        return cls(**manifest[key])
    except TypeError as e:
        raise FormatError(f'Checkpoint "{key}" section does not fit {cls.__name__}: {e}')


def _check_encoder(manifest, params):
    saved = manifest.get('encoder')
    if saved is None or params.encoder is None:
        return
    built = params.encoder.describe()
    differing = sorted(key for key in set(saved) | set(built)
                       if key not in REBUILD_ONLY_KEYS and saved.get(key) != built.get(key))
    if differing:
        raise FormatError(f'Checkpoint encoder {saved} does not match the rebuilt encoder {built} in {differing}')


def load_checkpoint(folder):
    """
    Rebuild parameters from a checkpoint directory
    :return: (HatnetParams, Checkpoint)
    """
    manifest = read_manifest(folder)
    tiling = _section(manifest, 'tiling', TilingConfig)
    model_cfg = _section(manifest, 'model', ModelConfig)
    if manifest.get('psi') and manifest['psi'] != model_cfg.psi:
        raise FormatError(f'Checkpoint psi "{manifest["psi"]}" disagrees with model section "{model_cfg.psi}"')
    params = HatnetParams.create(tiling, model_cfg, seed=0)
    _check_encoder(manifest, params)
    state = load_state(folder, manifest)
    params.load_state_dict(state)
    log.info(f'Loaded checkpoint {folder} (epoch {manifest.get("epoch")}, '
             f'validation accuracy {manifest.get("val_accuracy")})')
    checkpoint = Checkpoint(state, manifest.get('val_accuracy', 0.0), manifest.get('epoch', 0), folder,
                            manifest.get('extra', {}))
    return params, checkpoint


def load_features(path):
    """
    Precomputed word features: one HTNT tensor of shape n x m x d
    """
    array = htnt.load_array(path)
    if array.ndim != 3:
        raise ShapeError('precomputed word features must be n x m x d', array.shape)
    return array


def checkpoint_folder(root, epoch):
    return os.path.join(root, f'epoch-{epoch:04d}')


def final_folder(root):
    return os.path.join(root, 'final')
