"""
Classification metrics, attention overlap analysis and latency benchmarking.
"""
import math
import sys
import time
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage
from sklearn.metrics import roc_curve, auc
from tqdm import tqdm

from common.utils import get_logger
from errors import ShapeError, ContractError, ConfigError
from hatnet_model import predict, top_k_bags, top_k_words

BAG_LEVEL = 'bag'
WORD_LEVEL = 'word'
LEVELS = (BAG_LEVEL, WORD_LEVEL)
MASK_COVERAGE = 0.5
WARMUP_PASSES = 3
DEFAULT_TRIALS = 100
DICE_SWEEP_K = (10, 20, 30, 40, 50, 60)

log = get_logger('Evaluation')


@dataclass
class ConfusionMatrix:
    """
    Rows are ground truth, columns are predictions
    """
    counts: np.ndarray

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def to_list(self):
        return self.counts.tolist()


def confusion(preds, labels, num_classes):
    preds = [int(p) for p in preds]
    labels = [int(label) for label in labels]
    if len(preds) != len(labels):
        raise ShapeError('predictions and labels differ in length', [len(preds)], [len(labels)])
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, label in zip(preds, labels):
        if not (0 <= pred < num_classes and 0 <= label < num_classes):
            raise IndexError(f'class index out of range for {num_classes} classes: prediction {pred}, label {label}')
        counts[label, pred] += 1
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    """
    Per-class values are None when a class has no support (or no negatives for specificity and ROC-AUC);
    such classes are left out of the macro averages.
    """
    accuracy: float
    macro_f1: float
    weighted_f1: float
    macro_sensitivity: float
    macro_specificity: float
    macro_auc: Optional[float]
    precision: List[Optional[float]]
    sensitivity: List[Optional[float]]
    specificity: List[Optional[float]]
    f1: List[Optional[float]]
    auc: List[Optional[float]]
    support: List[int]
    confusion: List[List[int]] = field(default_factory=list)
    undefined_classes: List[int] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def one_vs_rest_auc(scores, labels, label):
    positives = labels == label
    if positives.all() or not positives.any():
        return None
    fpr, tpr, _ = roc_curve(positives.astype(int), scores[:, label])
    return float(auc(fpr, tpr))


def report(cm, scores, labels):
    """
    One-vs-rest precision, sensitivity, specificity, F1 and ROC-AUC per class, plus macro and weighted averages
    :param cm: ConfusionMatrix
    :param scores: per-sample class score vectors, N x C
    :param labels: N ground truth labels
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = cm.num_classes
    if scores.ndim != 2 or scores.shape != (len(labels), num_classes):
        raise ShapeError('scores must be N x C', scores.shape, [len(labels), num_classes])
    if cm.total != len(labels) or not np.array_equal(cm.counts.sum(axis=1), np.bincount(labels, minlength=num_classes)):
        raise ContractError('confusion matrix does not match the labels')

    total = cm.total
    precision, sensitivity, specificity, f1, aucs, support, undefined = [], [], [], [], [], [], []
    for c in range(num_classes):
        tp = int(cm.counts[c, c])
        fp = int(cm.counts[:, c].sum()) - tp
        fn = int(cm.counts[c, :].sum()) - tp
        tn = total - tp - fp - fn
        support.append(tp + fn)
        if tp + fn == 0:
            undefined.append(c)
            precision.append(None)
            sensitivity.append(None)
            specificity.append(None)
            f1.append(None)
        else:
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn)
            precision.append(p)
            sensitivity.append(r)
            f1.append(2 * p * r / (p + r) if p + r else 0.0)
            specificity.append(tn / (tn + fp) if tn + fp else None)
        aucs.append(one_vs_rest_auc(scores, labels, c))
    if undefined:
        log.warning(f'Classes without support are excluded from macro averages: {undefined}')

    weighted = sum(s * v for s, v in zip(support, f1) if v is not None) / total if total else 0.0
    return MetricsReport(
        accuracy=cm.accuracy,
        macro_f1=_mean_defined(f1) or 0.0,
        weighted_f1=float(weighted),
        macro_sensitivity=_mean_defined(sensitivity) or 0.0,
        macro_specificity=_mean_defined(specificity) or 0.0,
        macro_auc=_mean_defined(aucs),
        precision=precision,
        sensitivity=sensitivity,
        specificity=specificity,
        f1=f1,
        auc=aucs,
        support=support,
        confusion=cm.to_list(),
        undefined_classes=undefined,
    )


def roc_curves(scores, labels, num_classes):
    """
    One-vs-rest ROC curve per class
    :return: dict class -> (fpr, tpr, thresholds), classes lacking positives or negatives are skipped
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    curves = {}
    for c in range(num_classes):
        positives = labels == c
        if positives.all() or not positives.any():
            continue
        curves[c] = roc_curve(positives.astype(int), scores[:, c])
    return curves


def roc_frame(curves):
    rows = []
    for label, (fpr, tpr, thresholds) in curves.items():
        for x, y, t in zip(fpr, tpr, thresholds):
            rows.append({'class': label, 'fpr': float(x), 'tpr': float(y), 'threshold': float(t)})
    return pd.DataFrame(rows, columns=['class', 'fpr', 'tpr', 'threshold'])


def dice(a, b):
    """
    2|A and B| / (|A| + |B|); two empty masks score 1.0
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError('masks differ in dimensions', a.shape, b.shape)
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def predicted_mask(record, k_percent, level, shape):
    mask = np.zeros(shape, dtype=bool)
    if level == BAG_LEVEL:
        mask[top_k_bags(record, k_percent)] = True
    elif level == WORD_LEVEL:
        for bag, word in top_k_words(record, k_percent):
            mask[bag, word] = True
    else:
        raise ConfigError('level', f'unknown level "{level}", choose from {list(LEVELS)}')
    return mask


def _check_mask(record, mask, level):
    mask = np.asarray(mask, dtype=bool)
    expected = record.bag_coeffs.shape if level == BAG_LEVEL else record.word_coeffs.shape
    if mask.shape != tuple(expected):
        raise ShapeError(f'{level} mask does not match attention record', mask.shape, expected)
    return mask


def attention_overlap(record, mask, k_percent, level=BAG_LEVEL, restrict=True):
    """
    Dice between top-k attended cells and an annotated region.
    With restrict, only top-k cells lying inside the region form the prediction, so the score measures how
    much of the region the model attends to; without it all top-k cells are compared.
    :param mask: n bag mask, or n x m word mask
    """
    mask = _check_mask(record, mask, level)
    predicted = predicted_mask(record, k_percent, level, mask.shape)
    if restrict:
        predicted = np.logical_and(predicted, mask)
    return dice(predicted, mask)


def overlap_table(records, masks, names, classes, k_percent, level=BAG_LEVEL, restrict=True):
    """
    Per-image dice at one k
    :return: DataFrame with columns name, class, dice, empty; empty marks images whose prediction and
             annotation are both empty and so score 1.0
    """
    if not (len(records) == len(masks) == len(names) == len(classes)):
        raise ShapeError('records, masks, names and classes differ in length', [len(records)], [len(masks)],
                         [len(names)], [len(classes)])
    rows = []
    for record, mask, name, label in zip(records, masks, names, classes):
        mask = _check_mask(record, mask, level)
        predicted = predicted_mask(record, k_percent, level, mask.shape)
        if restrict:
            predicted = np.logical_and(predicted, mask)
        rows.append({'name': name, 'class': int(label), 'dice': dice(predicted, mask),
                     'empty': not predicted.any() and not mask.any()})
    return pd.DataFrame(rows, columns=['name', 'class', 'dice', 'empty'])


def dice_sweep(records, masks, classes, k_values=DICE_SWEEP_K, level=BAG_LEVEL, restrict=True):
    """
    Mean dice per class for each k
    :return: DataFrame with columns k_percent, class, dice
    """
    if not (len(records) == len(masks) == len(classes)):
        raise ShapeError('records, masks and classes differ in length', [len(records)], [len(masks)], [len(classes)])
    rows = []
    for k in k_values:
        for record, mask, label in zip(records, masks, classes):
            rows.append({'k_percent': k, 'class': int(label),
                         'dice': attention_overlap(record, mask, k, level, restrict)})
    frame = pd.DataFrame(rows, columns=['k_percent', 'class', 'dice'])
    return frame.groupby(['k_percent', 'class'], as_index=False)['dice'].mean()


def rasterize_mask(pixel_mask, geometry, level=BAG_LEVEL):
    """
    Down-sample a pixel annotation of the resized image to the bag or word grid; a cell is marked when at
    least half of its pixels are annotated
    """
    pixel_mask = np.asarray(pixel_mask, dtype=np.float64)
    if pixel_mask.ndim != 2:
        raise ShapeError('pixel mask must be 2-D', pixel_mask.shape)
    side = geometry.image_px
    if pixel_mask.shape != (side, side):
        factors = (side / pixel_mask.shape[0], side / pixel_mask.shape[1])
        pixel_mask = ndimage.zoom(pixel_mask, factors, order=0)[:side, :side]
    gb, gw = geometry.bag_grid, geometry.word_grid
    if level == BAG_LEVEL:
        cells = pixel_mask.reshape(gb, geometry.bag_px, gb, geometry.bag_px).mean(axis=(1, 3))
        return cells.reshape(geometry.n) >= MASK_COVERAGE
    if level == WORD_LEVEL:
        wp = geometry.word_px
        cells = pixel_mask.reshape(gb, gw, wp, gb, gw, wp).mean(axis=(2, 5)).transpose(0, 2, 1, 3)
        return cells.reshape(geometry.n, geometry.m) >= MASK_COVERAGE
    raise ConfigError('level', f'unknown level "{level}", choose from {list(LEVELS)}')


def coefficient_grid(record, geometry, level=BAG_LEVEL):
    """
    Attention coefficients laid out spatially: g_b x g_b for bags, (g_b * g_w) square for words
    """
    gb, gw = geometry.bag_grid, geometry.word_grid
    if level == BAG_LEVEL:
        return record.bag_coeffs.data.reshape(gb, gb)
    if level == WORD_LEVEL:
        words = record.word_coeffs.data.reshape(gb, gb, gw, gw).transpose(0, 2, 1, 3)
        return words.reshape(gb * gw, gb * gw)
    raise ConfigError('level', f'unknown level "{level}", choose from {list(LEVELS)}')


def save_heatmap(grid, path, cell_px=16):
    """
    Grayscale image of a coefficient grid, brightest cell = largest coefficient
    """
    grid = np.asarray(grid, dtype=np.float64)
    top = grid.max()
    scaled = grid / top if top > 0 else np.zeros_like(grid)
    pixels = np.kron((scaled * 255).round().astype(np.uint8), np.ones((cell_px, cell_px), dtype=np.uint8))
    Image.fromarray(pixels).save(path)


@dataclass
class Predictions:
    preds: List[int]
    scores: np.ndarray
    labels: List[int]
    records: list
    names: List[str]


def collect_predictions(params, dataset):
    preds, scores, labels, records, names = [], [], [], [], []
    for sample in dataset:
        prediction, record = predict(params, sample.input)
        preds.append(prediction.predicted_class)
        scores.append(prediction.probs.data.astype(np.float64))
        labels.append(int(sample.label))
        records.append(record)
        names.append(sample.name)
    return Predictions(preds, np.array(scores), labels, records, names)


def evaluate(params, dataset):
    """
    MetricsReport of a model over a dataset
    """
    if len(dataset) == 0:
        raise ContractError('evaluation set is empty')
    collected = collect_predictions(params, dataset)
    cm = confusion(collected.preds, collected.labels, params.model_cfg.num_classes)
    return report(cm, collected.scores, collected.labels), collected


@dataclass
class BenchmarkResult:
    mean_s: float
    std_s: float
    trials: int
    warmup: int
    times: List[float] = field(repr=False, default_factory=list)

    @property
    def formatted(self):
        return format_latency(self.mean_s, self.std_s)

    @property
    def coefficient_of_variation(self):
        return self.std_s / self.mean_s if self.mean_s > 0 else 0.0

    def to_dict(self):
        return {'mean_s': self.mean_s, 'std_s': self.std_s, 'trials': self.trials, 'warmup': self.warmup,
                'formatted': self.formatted}


def benchmark(params, sample, trials=DEFAULT_TRIALS, warmup=WARMUP_PASSES):
    """
    Wall-clock latency of a forward pass, warm-up passes discarded
    :return: BenchmarkResult with mean and sample standard deviation in seconds
    """
    if trials < 2:
        raise ContractError(f'benchmark needs at least 2 trials, got {trials}')
    for _ in range(warmup):
        predict(params, sample)
    times = []
    for _ in tqdm(range(trials), desc='Benchmark', unit='pass', disable=not sys.stderr.isatty()):
        start = time.perf_counter()
        predict(params, sample)
        times.append(time.perf_counter() - start)
    result = BenchmarkResult(float(np.mean(times)), float(np.std(times, ddof=1)), trials, warmup, times)
    log.info(f'Latency over {trials} trials: {result.formatted}')
    return result


def format_latency(mean_s, std_s):
    """
    "X s ± Y ms"
    """
    if not (math.isfinite(mean_s) and math.isfinite(std_s)):
        raise ContractError('latency values must be finite')
    return f'{mean_s:.3g} s ± {std_s * 1000:.3g} ms'


COMPARISON_COLUMNS = ['configuration', 'accuracy', 'f1', 'sensitivity', 'specificity', 'roc_auc']


def comparison_table(rows):
    """
    :param rows: (configuration name, MetricsReport) pairs, optionally with a dict of extra columns
    :return: DataFrame, one row per configuration
    """
    records = []
    extra_columns = []
    for row in rows:
        name, metrics = row[0], row[1]
        extra = row[2] if len(row) > 2 else {}
        record = {'configuration': name, 'accuracy': metrics.accuracy, 'f1': metrics.macro_f1,
                  'sensitivity': metrics.macro_sensitivity, 'specificity': metrics.macro_specificity,
                  'roc_auc': metrics.macro_auc}
        for key, value in extra.items():
            if key not in extra_columns:
                extra_columns.append(key)
            record[key] = value
        records.append(record)
    return pd.DataFrame(records, columns=COMPARISON_COLUMNS + extra_columns)
