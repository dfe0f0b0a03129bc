"""
Training loop: ADAM with linear warm-up and step decay, gradient accumulation, word augmentation and
averaging of the best validation checkpoints.
"""
import json
import os
import shutil
import sys
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from checkpoint import Checkpoint, save_checkpoint, checkpoint_folder, final_folder
from common.utils import get_logger
from errors import ConfigError, ContractError, NonFiniteError, ShapeError, TrainingError
from hatnet_model import TiledImage, loss as sample_loss, predict
from tensor import Tensor, ACCUM_DTYPE, backward

AUGMENT_SIZES = (192, 224, 256, 288, 320)
AUGMENT_REFERENCE_PX = 256
MAX_ROTATION = 10.0
TRAIN_LOG = 'train-log.jsonl'
CHECKPOINT_DIR = 'checkpoints'

log = get_logger('Trainer')


@dataclass
class TrainConfig:
    lr_start: float = 1e-7
    lr_peak: float = 1e-4
    warmup_iters: int = 600
    epochs_phase1: int = 50
    epochs_phase2: int = 50
    decay_factor: float = 0.5
    accum_steps: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    shuffle: bool = True
    checkpoint_top_k: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ('lr_start', 'lr_peak', 'decay_factor', 'beta1', 'beta2', 'adam_eps'):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(key, f'must be a number, got {value!r}')
        for key in ('warmup_iters', 'accum_steps', 'checkpoint_top_k'):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(key, f'must be an integer >= 1, got {value!r}')
        for key in ('epochs_phase1', 'epochs_phase2', 'seed'):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(key, f'must be a non-negative integer, got {value!r}')
        if not 0 < self.decay_factor < 1:
            raise ConfigError('decay_factor', f'must be in (0, 1), got {self.decay_factor}')
        for key in ('lr_start', 'lr_peak', 'adam_eps'):
            if not getattr(self, key) > 0:
                raise ConfigError(key, f'must be positive, got {getattr(self, key)}')
        for key in ('beta1', 'beta2'):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, f'must be in [0, 1), got {getattr(self, key)}')
        for key in ('augment', 'shuffle'):
            if not isinstance(getattr(self, key), bool):
                raise ConfigError(key, f'must be a boolean, got {getattr(self, key)!r}')

    @property
    def total_epochs(self):
        return self.epochs_phase1 + self.epochs_phase2

    def to_dict(self):
        return asdict(self)


def lr_at(cfg, global_iter, epoch):
    """
    Learning rate for an optimizer update
    :param global_iter: number of optimizer updates done so far
    :param epoch: zero-based epoch
    """
    if global_iter < 0 or epoch < 0:
        raise ContractError(f'counters must be non-negative, got iter {global_iter}, epoch {epoch}')
    if global_iter < cfg.warmup_iters:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * global_iter / cfg.warmup_iters
    if epoch < cfg.epochs_phase1:
        return cfg.lr_peak
    return cfg.lr_peak * cfg.decay_factor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.beta1, cfg.beta2, cfg.adam_eps)


def _named(params):
    if hasattr(params, 'named_parameters'):
        return params.named_parameters()
    return params


def adam_step(state, params, grads, lr):
    """
    One bias-corrected ADAM update, in place
    :param params: HatnetParams or mapping name -> Tensor
    :param grads: mapping name -> gradient array, None counts as zero
    """
    named = _named(params)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in named.items():
        grad = grads.get(name)
        grad = np.zeros(tensor.shape, ACCUM_DTYPE) if grad is None else np.asarray(grad, dtype=ACCUM_DTYPE)
        if grad.shape != tensor.shape:
            raise ShapeError(f'gradient of {name} does not match parameter', grad.shape, tensor.shape)
        first = state.first.get(name, np.zeros(tensor.shape, ACCUM_DTYPE))
        second = state.second.get(name, np.zeros(tensor.shape, ACCUM_DTYPE))
        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad * grad
        state.first[name] = first
        state.second[name] = second
        update = lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        tensor.data = (tensor.data.astype(ACCUM_DTYPE) - update).astype(tensor.dtype)
    return params, state


@dataclass
class AugmentParams:
    size: int
    flip_horizontal: bool
    flip_vertical: bool
    angle: float


def sample_augmentation(rng, word_px):
    """
    Draw resize target, flips and rotation angle; resize targets scale with word_px
    """
    sizes = [max(1, int(round(size * word_px / AUGMENT_REFERENCE_PX))) for size in AUGMENT_SIZES]
    size = sizes[int(rng.integers(len(sizes)))]
    flip_horizontal = bool(rng.random() < 0.5)
    flip_vertical = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    return AugmentParams(size, flip_horizontal, flip_vertical, angle)


def _resize(word, height, width):
    factors = (height / word.shape[0], width / word.shape[1], 1)
    return ndimage.zoom(word, factors, order=1, mode='nearest')[:height, :width]


def apply_augmentation(word, aug):
    """
    :param word: word_px x word_px x channels pixels
    """
    word_px = word.shape[0]
    out = np.asarray(word, dtype=np.float64)
    if aug.size != word_px:
        out = _resize(_resize(out, aug.size, aug.size), word_px, word_px)
    if aug.flip_horizontal:
        out = out[:, ::-1]
    if aug.flip_vertical:
        out = out[::-1, :]
    if aug.angle != 0.0:
        out = ndimage.rotate(out, aug.angle, axes=(1, 0), reshape=False, order=1, mode='reflect')
    return np.ascontiguousarray(out).astype(np.asarray(word).dtype)


def augment_word(word, rng):
    return apply_augmentation(word, sample_augmentation(rng, word.shape[0]))


def augment_sample(tiled, rng):
    """
    Augment every word of a tiled image independently, bag by bag in row-major order
    """
    g = tiled.geometry
    words = tiled.words.data
    out = np.empty_like(words)
    for bag in range(g.n):
        for word in range(g.m):
            out[bag, word] = augment_word(words[bag, word], rng)
    return TiledImage(Tensor(out), g)


@dataclass
class TrainState:
    adam: AdamState
    rng: np.random.Generator
    global_iter: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, cfg):
        return cls(AdamState.from_config(cfg), np.random.default_rng(cfg.seed))


@dataclass
class EpochLog:
    epoch: int
    iter: int
    lr: float
    loss: float
    train_accuracy: float
    updates: int
    val_accuracy: Optional[float] = None

    def record(self):
        return {'epoch': self.epoch, 'iter': self.iter, 'lr': self.lr, 'loss': self.loss,
                'val_accuracy': self.val_accuracy}


def _apply_update(params, cfg, state, accumulated):
    lr = lr_at(cfg, state.global_iter, state.epoch)
    grads = {name: None if t.grad is None else t.grad.astype(ACCUM_DTYPE) / accumulated
             for name, t in params.named_parameters().items()}
    adam_step(state.adam, params, grads, lr)
    state.global_iter += 1
    params.zero_grad()
    return lr


def train_epoch(params, data, cfg, state):
    """
    One pass over the training samples, updating every accum_steps samples with averaged gradients.
    A trailing partial accumulation is flushed at the end of the epoch.
    :param data: sequence of samples with name, label and input
    :return: EpochLog
    """
    if len(data) == 0:
        raise ContractError('training set is empty')
    order = state.rng.permutation(len(data)) if cfg.shuffle else np.arange(len(data))
    params.zero_grad()
    accumulated = 0
    updates = 0
    losses = []
    correct = 0
    lr = lr_at(cfg, state.global_iter, state.epoch)
    for index in order:
        sample = data[int(index)]
        features = sample.input
        if cfg.augment and isinstance(features, TiledImage):
            features = augment_sample(features, state.rng)
        try:
            value, prediction, _ = sample_loss(params, features, sample.label)
        except NonFiniteError as e:
            raise TrainingError(f'Non-finite loss in epoch {state.epoch}: {e}', sample.name)
        backward(value)
        losses.append(value.item())
        correct += int(prediction.predicted_class == sample.label)
        accumulated += 1
        if accumulated == cfg.accum_steps:
            lr = _apply_update(params, cfg, state, accumulated)
            accumulated = 0
            updates += 1
    if accumulated:
        lr = _apply_update(params, cfg, state, accumulated)
        updates += 1
    return EpochLog(epoch=state.epoch, iter=state.global_iter, lr=float(lr), loss=float(np.mean(losses)),
                    train_accuracy=correct / len(data), updates=updates)


def evaluate_accuracy(params, dataset):
    if len(dataset) == 0:
        raise ContractError('evaluation set is empty')
    correct = 0
    for sample in dataset:
        prediction, _ = predict(params, sample.input)
        correct += int(prediction.predicted_class == sample.label)
    return correct / len(dataset)


def rank_checkpoints(checkpoints):
    """
    Best validation accuracy first, earlier epoch wins ties
    """
    return sorted(checkpoints, key=lambda c: (-c.val_accuracy, c.epoch))


def average_checkpoints(checkpoints, template, top_k=None):
    """
    Arithmetic mean, per parameter, of the top_k checkpoints by validation accuracy
    :param checkpoints: list of Checkpoint
    :param template: HatnetParams providing structure and dtype
    :return: new HatnetParams
    """
    if not checkpoints:
        raise ContractError('average_checkpoints needs at least one checkpoint')
    selected = rank_checkpoints(checkpoints)[:top_k or len(checkpoints)]
    names = list(selected[0].state.keys())
    for checkpoint in selected[1:]:
        if list(checkpoint.state.keys()) != names:
            raise ShapeError(f'checkpoint of epoch {checkpoint.epoch} has different parameter names')
        for name in names:
            if checkpoint.state[name].shape != selected[0].state[name].shape:
                raise ShapeError(f'parameter {name} differs across checkpoints',
                                 checkpoint.state[name].shape, selected[0].state[name].shape)
    averaged = {}
    for name in names:
        total = np.zeros(selected[0].state[name].shape, dtype=ACCUM_DTYPE)
        for checkpoint in selected:
            total += checkpoint.state[name].astype(ACCUM_DTYPE)
        averaged[name] = total / len(selected)
    params = template.clone()
    params.load_state_dict(averaged)
    log.info(f'Averaged {len(selected)} checkpoints from epochs {[c.epoch for c in selected]}')
    return params


class TrainingLog:
    """
    Line-delimited JSON records, one per epoch
    """

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            folder = os.path.dirname(path)
            if folder:
                os.makedirs(folder, exist_ok=True)
            open(path, 'w').close()

    def write(self, record):
        self.records.append(record)
        if self.path:
            with open(self.path, 'a') as log_file:
                log_file.write(json.dumps(record, sort_keys=True) + '\n')


@dataclass
class FitResult:
    params: object
    history: List[EpochLog]
    checkpoints: List[Checkpoint]


def fit(params, train_set, val_set, cfg, out_dir=None):
    """
    Full schedule: per-epoch training and validation, best-k checkpoint retention, final averaging
    :param val_set: validation samples, the training set is used for selection when empty
    :param out_dir: when given, receives the JSON-lines log, retained checkpoints and the averaged model
    :return: FitResult with the averaged parameters
    """
    cfg.validate()
    state = TrainState.create(cfg)
    selection_set = val_set if val_set else train_set
    if not val_set:
        log.warning('No validation samples, checkpoints are selected on training accuracy')
    train_log = TrainingLog(os.path.join(out_dir, TRAIN_LOG) if out_dir else None)
    checkpoint_root = os.path.join(out_dir, CHECKPOINT_DIR) if out_dir else None
    history = []
    best = []
    epochs = tqdm(range(cfg.total_epochs), desc='Training', unit='epoch', disable=not sys.stderr.isatty())
    for epoch in epochs:
        state.epoch = epoch
        epoch_log = train_epoch(params, train_set, cfg, state)
        epoch_log.val_accuracy = evaluate_accuracy(params, selection_set)
        history.append(epoch_log)
        train_log.write(epoch_log.record())
        log.debug(f'Epoch {epoch}: loss {epoch_log.loss:.4f}, lr {epoch_log.lr:.3g}, '
                  f'train accuracy {epoch_log.train_accuracy:.3f}, validation accuracy {epoch_log.val_accuracy:.3f}')
        best = _retain(best, params, epoch_log, cfg.checkpoint_top_k, checkpoint_root)

    if not best:
        raise TrainingError('No epochs were run, nothing to average')
    averaged = average_checkpoints(best, params, cfg.checkpoint_top_k)
    if out_dir:
        save_checkpoint(final_folder(out_dir), averaged, evaluate_accuracy(averaged, selection_set),
                        history[-1].epoch, {'averaged_epochs': [c.epoch for c in rank_checkpoints(best)]})
    log.info(f'Training finished after {len(history)} epochs and {state.global_iter} updates')
    return FitResult(averaged, history, rank_checkpoints(best))


def _retain(best, params, epoch_log, top_k, checkpoint_root):
    if checkpoint_root:
        candidate = save_checkpoint(checkpoint_folder(checkpoint_root, epoch_log.epoch), params,
                                    epoch_log.val_accuracy, epoch_log.epoch)
    else:
        candidate = Checkpoint.capture(params, epoch_log.val_accuracy, epoch_log.epoch)
    ranked = rank_checkpoints(best + [candidate])
    for dropped in ranked[top_k:]:
        if dropped.path and os.path.isdir(dropped.path):
            shutil.rmtree(dropped.path)
    return ranked[:top_k]
