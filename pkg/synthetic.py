"""
Synthetic planted-motif datasets and dataset ingestion.

Every image is a grid of bags of words over a flat background. Each class owns one oriented stripe
texture (its motif); a sample of class c carries that motif in some of its words, so the label is a
deterministic function of which motif appears and the motif locations are ground-truth region masks.
"""
import json
import math
import os
import sys
from dataclasses import dataclass, field, asdict, replace
from typing import List, Optional

import numpy as np
from tqdm import tqdm

import htnt
from common.utils import get_logger
from errors import ConfigError, FormatError
from hatnet_model import TilingConfig, TiledImage, WordFeatures, tile_image, reassemble
from tensor import Tensor

MANIFEST = 'manifest.json'
SAMPLE_DIR = 'samples'
GEOMETRY_KEYS = ('n', 'm', 'bag_px', 'word_px', 'channels')
SAMPLE_KEYS = ('name', 'label')
TRAIN = 'train'
VAL = 'val'
TEST = 'test'
SPLITS = (TRAIN, VAL, TEST)
DEFAULT_SPLIT_FRACTIONS = (0.39, 0.10, 0.51)
BACKGROUND_LEVEL = 0.5
MOTIF_AMPLITUDE = 0.4
MOTIF_CYCLES = 4
DEFAULT_FEATURE_DIM = 32

log = get_logger('Synthetic')


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 4
    bag_grid: int = 4
    word_grid: int = 4
    word_px: int = 32
    channels: int = 1
    motif_density: float = 0.5
    word_density: float = 0.5
    noise: float = 0.0
    seed: int = 0
    split_fractions: List[float] = field(default_factory=lambda: list(DEFAULT_SPLIT_FRACTIONS))

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ('num_classes', 'samples_per_class', 'bag_grid', 'word_grid', 'word_px', 'channels'):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(key, f'must be a positive integer, got {value!r}')
        if self.num_classes < 2:
            raise ConfigError('num_classes', f'at least 2 classes are needed, got {self.num_classes}')
        for key in ('motif_density', 'word_density', 'noise'):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(key, f'must be a number, got {value!r}')
        for key in ('motif_density', 'word_density'):
            if not 0 < getattr(self, key) <= 1:
                raise ConfigError(key, f'must be in (0, 1], got {getattr(self, key)}')
        if self.noise < 0:
            raise ConfigError('noise', f'must be non-negative, got {self.noise}')
        fractions = list(self.split_fractions)
        if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
            raise ConfigError('split_fractions', f'need three non-negative fractions summing to 1, got {fractions}')

    @property
    def n(self):
        return self.bag_grid * self.bag_grid

    @property
    def m(self):
        return self.word_grid * self.word_grid

    def tiling(self, d=DEFAULT_FEATURE_DIM):
        return TilingConfig(n=self.n, m=self.m, bag_px=self.word_grid * self.word_px, word_px=self.word_px, d=d,
                            channels=self.channels)

    def to_dict(self):
        return asdict(self)


@dataclass
class Sample:
    name: str
    label: int
    input: object
    split: str = TRAIN
    bag_mask: Optional[np.ndarray] = None
    word_mask: Optional[np.ndarray] = None


@dataclass
class Dataset:
    samples: List[Sample]
    tiling: TilingConfig
    num_classes: int
    manifest: dict = field(default_factory=dict)

    def subset(self, split):
        if split == 'all':
            return list(self.samples)
        if split not in SPLITS:
            raise ConfigError('split', f'unknown split "{split}", choose from {list(SPLITS) + ["all"]}')
        return [s for s in self.samples if s.split == split]

    def __len__(self):
        return len(self.samples)


def motif_template(label, num_classes, word_px, channels=1):
    """
    Stripe texture of a class: MOTIF_CYCLES periods across the word, orientation label * 180 / num_classes degrees
    """
    theta = math.pi * label / num_classes
    coords = np.arange(word_px, dtype=np.float64)
    y, x = np.meshgrid(coords, coords, indexing='ij')
    phase = 2 * math.pi * MOTIF_CYCLES * (x * math.cos(theta) + y * math.sin(theta)) / word_px
    texture = BACKGROUND_LEVEL + MOTIF_AMPLITUDE * np.sin(phase)
    return np.repeat(texture[:, :, None], channels, axis=2)


def background_template(word_px, channels=1):
    return np.full((word_px, word_px, channels), BACKGROUND_LEVEL)


def plant_motifs(spec, rng):
    """
    Choose motif bags, and words inside each motif bag
    :return: (bag mask [n], word mask [n x m])
    """
    bag_count = max(1, int(round(spec.motif_density * spec.n)))
    word_count = max(1, int(round(spec.word_density * spec.m)))
    bag_mask = np.zeros(spec.n, dtype=bool)
    word_mask = np.zeros((spec.n, spec.m), dtype=bool)
    for bag in sorted(rng.choice(spec.n, size=bag_count, replace=False)):
        bag_mask[bag] = True
        word_mask[bag, rng.choice(spec.m, size=word_count, replace=False)] = True
    return bag_mask, word_mask


def render_sample(spec, label, rng):
    """
    :return: (words [n x m x px x px x c] float32, bag mask, word mask)
    """
    bag_mask, word_mask = plant_motifs(spec, rng)
    motif = motif_template(label, spec.num_classes, spec.word_px, spec.channels)
    background = background_template(spec.word_px, spec.channels)
    words = np.where(word_mask[:, :, None, None, None], motif, background)
    if spec.noise > 0:
        words = words + rng.normal(0.0, spec.noise, size=words.shape)
    return words.astype(np.float32), bag_mask, word_mask


def split_counts(count, fractions):
    """
    Per-class train/val/test sizes; rounding leftovers go to the test split
    """
    train = int(round(fractions[0] * count))
    val = min(count - train, int(round(fractions[1] * count)))
    return {TRAIN: train, VAL: val, TEST: count - train - val}


def generate_samples(spec, d=DEFAULT_FEATURE_DIM):
    """
    In-memory generation, deterministic for a given spec
    :return: Dataset
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    tiling = spec.tiling(d)
    samples = []
    counts = split_counts(spec.samples_per_class, spec.split_fractions)
    split_table = {split: {} for split in SPLITS}
    total = spec.num_classes * spec.samples_per_class
    progress = tqdm(total=total, desc='Generating', unit='sample', disable=not sys.stderr.isatty())
    for label in range(spec.num_classes):
        assignment = [TRAIN] * counts[TRAIN] + [VAL] * counts[VAL] + [TEST] * counts[TEST]
        assignment = [assignment[i] for i in rng.permutation(len(assignment))]
        for split in SPLITS:
            split_table[split][str(label)] = counts[split]
        for index in range(spec.samples_per_class):
            words, bag_mask, word_mask = render_sample(spec, label, rng)
            name = f'sample-{label}-{index:04d}'
            samples.append(Sample(name, label, TiledImage(Tensor(words), tiling), assignment[index], bag_mask,
                                  word_mask))
            progress.update(1)
    progress.close()
    manifest = {'spec': spec.to_dict(), 'geometry': _geometry(tiling), 'd': tiling.d, 'num_classes': spec.num_classes,
                'splits': split_table}
    return Dataset(samples, tiling, spec.num_classes, manifest)


def _geometry(tiling):
    return {'n': tiling.n, 'm': tiling.m, 'bag_px': tiling.bag_px, 'word_px': tiling.word_px,
            'channels': tiling.channels}


def generate_synthetic(spec, out_dir, d=DEFAULT_FEATURE_DIM):
    """
    Materialize a synthetic dataset: one HTNT word tensor per sample plus manifest.json with labels, splits
    and ground-truth masks
    :return: Dataset
    """
    dataset = generate_samples(spec, d)
    sample_dir = os.path.join(out_dir, SAMPLE_DIR)
    os.makedirs(sample_dir, exist_ok=True)
    entries = []
    for sample in dataset.samples:
        file_name = os.path.join(SAMPLE_DIR, sample.name + htnt.EXTENSION)
        htnt.save(os.path.join(out_dir, file_name), sample.input.words)
        entries.append({'name': sample.name, 'label': sample.label, 'split': sample.split, 'words': file_name,
                        'bag_mask': sample.bag_mask.astype(int).tolist(),
                        'word_mask': sample.word_mask.astype(int).tolist()})
    manifest = dict(dataset.manifest, samples=entries)
    with open(os.path.join(out_dir, MANIFEST), 'w') as manifest_file:
        json.dump(manifest, manifest_file, indent=2)
    dataset.manifest = manifest
    for split in SPLITS:
        log.info(f'{split}: {sum(dataset.manifest["splits"][split].values())} samples')
    log.info(f'Synthetic dataset with {len(dataset)} samples written to {out_dir}')
    return dataset


def load_dataset(folder, tiling=None):
    """
    Read a dataset directory: manifest.json listing samples with either "words" (n x m x px x px x c) or
    "features" (n x m x d) HTNT files
    :param tiling: expected TilingConfig, derived from the manifest geometry when omitted
    :return: Dataset
    """
    path = os.path.join(folder, MANIFEST)
    if not os.path.isfile(path):
        raise FormatError(f'"{folder}" is not a dataset, {MANIFEST} is missing')
    try:
        with open(path) as manifest_file:
            manifest = json.load(manifest_file)
    except json.JSONDecodeError as e:
        raise FormatError(f'Invalid dataset manifest {path}: {e}')
    if not isinstance(manifest, dict):
        raise FormatError(f'Dataset manifest {path} is not a JSON object')
    for key in ('geometry', 'num_classes', 'samples'):
        if key not in manifest:
            raise FormatError(f'Dataset manifest {path} has no "{key}" section')
    geometry = manifest['geometry']
    if not isinstance(geometry, dict) or any(key not in geometry for key in GEOMETRY_KEYS):
        raise FormatError(f'Dataset manifest {path} geometry must list {list(GEOMETRY_KEYS)}, got {geometry}')
    if tiling is None:
        tiling = TilingConfig(d=manifest.get('d', DEFAULT_FEATURE_DIM), **{k: geometry[k] for k in GEOMETRY_KEYS})
    elif _geometry(tiling) != {key: geometry.get(key) for key in _geometry(tiling)}:
        raise ConfigError('tiling', f'configured geometry {_geometry(tiling)} differs from dataset {geometry}')

    samples = []
    for position, entry in enumerate(manifest['samples']):
        missing = [key for key in SAMPLE_KEYS if not isinstance(entry, dict) or key not in entry]
        if missing:
            raise FormatError(f'Dataset manifest entry {position} is missing {missing}')
        if 'words' in entry:
            sample_input = TiledImage(htnt.load(os.path.join(folder, entry['words'])), tiling)
        elif 'features' in entry:
            sample_input = WordFeatures(htnt.load(os.path.join(folder, entry['features'])))
            if sample_input.b_cnn.dims != [tiling.n, tiling.m, tiling.d]:
                raise ConfigError('d', f'features of {entry["name"]} are {sample_input.b_cnn.dims}, '
                                       f'expected {[tiling.n, tiling.m, tiling.d]}')
        else:
            raise FormatError(f'Sample {entry.get("name")} has neither words nor features')
        try:
            label = int(entry['label'])
        except (TypeError, ValueError):
            raise FormatError(f'Sample {entry["name"]} has label {entry["label"]!r}, expected a class index')
        if not 0 <= label < manifest['num_classes']:
            raise FormatError(f'Sample {entry.get("name")} has label {label} outside {manifest["num_classes"]} classes')
        bag_mask = np.array(entry['bag_mask'], dtype=bool) if 'bag_mask' in entry else None
        word_mask = np.array(entry['word_mask'], dtype=bool) if 'word_mask' in entry else None
        samples.append(Sample(entry['name'], label, sample_input, entry.get('split', TRAIN), bag_mask, word_mask))
    log.info(f'Loaded {len(samples)} samples from {folder}')
    return Dataset(samples, tiling, int(manifest['num_classes']), manifest)


def nearest_template_label(words, num_classes):
    """
    Class whose motif template is closest to any word of the sample
    :param words: n x m x px x px x c array
    """
    words = np.asarray(words, dtype=np.float64)
    flat = words.reshape(-1, *words.shape[2:])
    best = []
    for label in range(num_classes):
        template = motif_template(label, num_classes, words.shape[2], words.shape[4])
        best.append(np.min(np.sum((flat - template) ** 2, axis=(1, 2, 3))))
    return int(np.argmin(best))


def retile_dataset(dataset, tiling):
    """
    Same images cut into a different bag/word geometry with the same word size
    """
    source = dataset.tiling
    if tiling.word_px != source.word_px or tiling.image_px != source.image_px:
        raise ConfigError('tiling', f'retiling keeps word size and image side, got {tiling.to_dict()} '
                                    f'for {source.to_dict()}')
    mask_geometry = replace(source, channels=1)
    mask_tiling = replace(tiling, channels=1)
    samples = []
    for sample in dataset.samples:
        if not isinstance(sample.input, TiledImage):
            raise ConfigError('data', 'only pixel datasets can be retiled')
        tiled = tile_image(reassemble(sample.input), tiling)
        bag_mask = word_mask = None
        if sample.word_mask is not None:
            cells = np.broadcast_to(sample.word_mask[:, :, None, None, None].astype(np.float32),
                                    (source.n, source.m, source.word_px, source.word_px, 1))
            pixels = reassemble(TiledImage(Tensor(np.ascontiguousarray(cells)), mask_geometry))
            retiled = tile_image(pixels, mask_tiling).words.data
            word_mask = retiled.reshape(tiling.n, tiling.m, -1).mean(axis=2) >= 0.5
            bag_mask = word_mask.any(axis=1)
        samples.append(Sample(sample.name, sample.label, tiled, sample.split, bag_mask, word_mask))
    return Dataset(samples, tiling, dataset.num_classes, dict(dataset.manifest, geometry=_geometry(tiling)))
