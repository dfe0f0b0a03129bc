"""
Holistic attention network: words -> bags -> image.

A resized image is tiled into n bags of m words. Words are encoded independently, related to each other
inside their bag (word-to-word), pooled into bags along two branches (word-to-bag), related across bags
(bag-to-bag), pooled into one image vector (bag-to-image) and classified.
"""
import copy
import math
from collections import OrderedDict, Counter
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy import ndimage

from attention import TransformerParams, MultiHeadParams, multi_head, transformer_unit, init_matrix, init_bias
from common.utils import get_logger, load_plugin
from errors import ConfigError, ShapeError, ContractError
from tensor import Tensor, DEFAULT_DTYPE, matmul, softmax_rows, reshape, l2_rows, l1_rows, mean_rows, linear, \
    cross_entropy_logits, add, layer_norm_rows, no_grad

EUCLIDEAN = 'euclidean'
MANHATTAN = 'manhattan'
MEAN = 'mean'
PSI_KINDS = (EUCLIDEAN, MANHATTAN, MEAN)

TOY_ENCODER = 'toy'
PRECOMPUTED = 'precomputed'
ENCODER_MODES = (TOY_ENCODER, PRECOMPUTED)
ENCODER_PLUGINS = {
    TOY_ENCODER: ('encoders.toy_encoder', 'ToyWordEncoder'),
    PRECOMPUTED: ('encoders.precomputed', 'PrecomputedFeatures'),
}

ENCODER_PREFIX = 'encoder'

log = get_logger('HATNet Model')


def _grid_side(count, key):
    side = math.isqrt(count) if count > 0 else 0
    if side * side != count:
        raise ConfigError(key, f'{count} is not a square grid size')
    return side


@dataclass
class TilingConfig:
    n: int = 49
    m: int = 49
    bag_px: int = 1792
    word_px: int = 256
    d: int = 256
    channels: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ('n', 'm', 'bag_px', 'word_px', 'd', 'channels'):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(key, f'must be an integer, got {value!r}')
            if value <= 0:
                raise ConfigError(key, f'must be positive, got {value}')

    def check_grid(self):
        """
        Pixel geometry constraints, needed whenever images are tiled; word features alone only need n, m and d
        """
        _grid_side(self.n, 'n')
        if self.bag_px != self.word_grid * self.word_px:
            raise ConfigError('bag_px', f'bag side {self.bag_px} must equal sqrt(m) * word_px = '
                                        f'{self.word_grid * self.word_px}')

    @property
    def bag_grid(self):
        return _grid_side(self.n, 'n')

    @property
    def word_grid(self):
        return _grid_side(self.m, 'm')

    @property
    def image_px(self):
        return self.bag_grid * self.bag_px

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelConfig:
    heads: int = 4
    num_classes: int = 4
    psi: str = EUCLIDEAN
    residual_norm: bool = False
    bias: bool = False
    encoder: str = TOY_ENCODER
    encoder_module: Optional[str] = None
    encoder_class: Optional[str] = None
    encoder_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self, d=None):
        if isinstance(self.heads, bool) or not isinstance(self.heads, int) or self.heads <= 0:
            raise ConfigError('heads', f'must be a positive integer, got {self.heads!r}')
        if d is not None and d % self.heads != 0:
            raise ConfigError('heads', f'd ({d}) must be divisible by heads ({self.heads})')
        if isinstance(self.num_classes, bool) or not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigError('num_classes', f'must be an integer >= 2, got {self.num_classes!r}')
        if self.psi not in PSI_KINDS:
            raise ConfigError('psi', f'unknown kind "{self.psi}", choose from {list(PSI_KINDS)}')
        if self.encoder not in ENCODER_MODES:
            raise ConfigError('encoder', f'unknown mode "{self.encoder}", choose from {list(ENCODER_MODES)}')
        for key in ('residual_norm', 'bias'):
            if not isinstance(getattr(self, key), bool):
                raise ConfigError(key, f'must be a boolean, got {getattr(self, key)!r}')
        if not isinstance(self.encoder_params, dict):
            raise ConfigError('encoder_params', 'must be a mapping')

    def to_dict(self):
        return asdict(self)


@dataclass
class TiledImage:
    words: Tensor
    geometry: TilingConfig

    def __post_init__(self):
        g = self.geometry
        g.check_grid()
        expected = [g.n, g.m, g.word_px, g.word_px, g.channels]
        if self.words.dims != expected:
            raise ShapeError('tiled words do not match geometry', self.words.dims, expected)

    def word_rect(self, bag, word):
        """
        Pixel rectangle of a word in the resized image
        :return: (top, left, height, width)
        """
        g = self.geometry
        if not (0 <= bag < g.n and 0 <= word < g.m):
            raise IndexError(f'bag {bag} / word {word} out of range for {g.n} bags x {g.m} words')
        top = (bag // g.bag_grid) * g.bag_px + (word // g.word_grid) * g.word_px
        left = (bag % g.bag_grid) * g.bag_px + (word % g.word_grid) * g.word_px
        return top, left, g.word_px, g.word_px

    def bag_rect(self, bag):
        g = self.geometry
        if not 0 <= bag < g.n:
            raise IndexError(f'bag {bag} out of range for {g.n} bags')
        return (bag // g.bag_grid) * g.bag_px, (bag % g.bag_grid) * g.bag_px, g.bag_px, g.bag_px

    def locate(self, y, x):
        """
        (bag, word) index covering pixel (y, x) of the resized image
        """
        g = self.geometry
        if not (0 <= y < g.image_px and 0 <= x < g.image_px):
            raise IndexError(f'pixel ({y}, {x}) outside {g.image_px} x {g.image_px} image')
        bag = (y // g.bag_px) * g.bag_grid + x // g.bag_px
        word = ((y % g.bag_px) // g.word_px) * g.word_grid + (x % g.bag_px) // g.word_px
        return bag, word


@dataclass
class WordFeatures:
    b_cnn: Tensor

    def __post_init__(self):
        if self.b_cnn.ndim != 3:
            raise ShapeError('word features must be n x m x d', self.b_cnn.dims)

    @property
    def n(self):
        return self.b_cnn.shape[0]

    @property
    def m(self):
        return self.b_cnn.shape[1]

    @property
    def d(self):
        return self.b_cnn.shape[2]


@dataclass
class AttentionRecord:
    word_coeffs: Tensor
    bag_coeffs: Tensor
    cnn_word_coeffs: Optional[Tensor] = None
    stage_weights: Optional[dict] = None


@dataclass
class Prediction:
    probs: Tensor
    logits: Optional[Tensor] = None
    predicted_class: Optional[int] = None

    def __post_init__(self):
        if self.predicted_class is None:
            self.predicted_class = int(np.argmax(self.probs.data))


def resize_bilinear(image, height, width):
    """
    Bilinear resize of an H x W x C array, returned unchanged when the size already matches
    """
    if image.shape[:2] == (height, width):
        return image
    factors = (height / image.shape[0], width / image.shape[1], 1)
    resized = ndimage.zoom(image.astype(np.float64), factors, order=1, mode='nearest')
    return resized[:height, :width].astype(image.dtype)


def tile_image(image, cfg):
    """
    Resize an image to the configured side and split it into n bags x m words, both row-major
    :param image: h x w x c (or h x w) pixel array
    :param cfg: TilingConfig
    :return: TiledImage
    """
    cfg.check_grid()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or min(image.shape) <= 0:
        raise ConfigError('image', f'image must be a non-empty h x w x c array, got {list(image.shape)}')
    if image.shape[2] != cfg.channels:
        raise ConfigError('channels', f'image has {image.shape[2]} channels, configuration expects {cfg.channels}')
    side = cfg.image_px
    if image.shape[:2] != (side, side):
        log.debug(f'Resizing image {image.shape[0]}x{image.shape[1]} to {side}x{side}')
    image = resize_bilinear(image, side, side)
    gb, gw, wp, c = cfg.bag_grid, cfg.word_grid, cfg.word_px, cfg.channels
    words = image.reshape(gb, gw, wp, gb, gw, wp, c).transpose(0, 3, 1, 4, 2, 5, 6)
    return TiledImage(Tensor(words.reshape(cfg.n, cfg.m, wp, wp, c)), cfg)


def reassemble(tiled):
    """
    Inverse of tile_image's split: rebuild the resized image from its words
    """
    g = tiled.geometry
    gb, gw, wp, c = g.bag_grid, g.word_grid, g.word_px, g.channels
    words = tiled.words.data.reshape(gb, gb, gw, gw, wp, wp, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return words.reshape(g.image_px, g.image_px, c)


def create_encoder(model_cfg, tiling, seed):
    """
    Instantiate the configured word encoder plugin
    """
    module_name, class_name = ENCODER_PLUGINS[model_cfg.encoder]
    module_name = model_cfg.encoder_module or module_name
    class_name = model_cfg.encoder_class or class_name
    params = {'d': tiling.d}
    if model_cfg.encoder == TOY_ENCODER:
        tiling.check_grid()
        params.update({'word_px': tiling.word_px, 'channels': tiling.channels, 'seed': seed, 'bias': model_cfg.bias})
    params.update(model_cfg.encoder_params)
    encoder = load_plugin(module_name, class_name, params)
    for member in ('out_dim', 'named_tensors', 'encode'):
        if not hasattr(encoder, member):
            raise ConfigError('encoder_class', f'{class_name} is not a word encoder (missing {member})')
    return encoder


class HatnetParams:
    """
    All learned tensors, addressable by name.

    encoder.*            word encoder (absent for precomputed features)
    w2w.mha.* / w2w.ffn.* word-to-word transformer unit
    w2b.self              m x m, pools word-to-word outputs
    w2b.cnn               m x m, pools encoder outputs
    b2b.self.*            bag self-attention over encoder-branch bags
    b2b.cross.*           bag cross-attention and FFN
    b2i                   n x n, pools bags into the image vector
    cls                   d x C classifier
    """

    def __init__(self, tiling, model_cfg, encoder, w2w, w2b_self, w2b_cnn, b2b_self, b2b_cross, b2i, cls,
                 cls_bias=None):
        self.tiling = tiling
        self.model_cfg = model_cfg
        self.encoder = encoder
        self.w2w = w2w
        self.w2b_self = w2b_self
        self.w2b_cnn = w2b_cnn
        self.b2b_self = b2b_self
        self.b2b_cross = b2b_cross
        self.b2i = b2i
        self.cls = cls
        self.cls_bias = cls_bias
        self._check_dims()

    def _check_dims(self):
        n, m, d, c = self.tiling.n, self.tiling.m, self.tiling.d, self.model_cfg.num_classes
        for name, value, expected in (('w2b.self', self.w2b_self, [m, m]), ('w2b.cnn', self.w2b_cnn, [m, m]),
                                      ('b2i', self.b2i, [n, n]), ('cls', self.cls, [d, c])):
            if value.dims != expected:
                raise ShapeError(f'parameter {name} has wrong dimensions', value.dims, expected)
        if self.encoder is not None and self.encoder.out_dim != d:
            raise ConfigError('d', f'encoder produces {self.encoder.out_dim}-d features, configuration expects {d}')

    @classmethod
    def create(cls, tiling, model_cfg, seed=0, dtype=DEFAULT_DTYPE):
        model_cfg.validate(tiling.d)
        rng = np.random.default_rng(seed)
        n, m, d, bias = tiling.n, tiling.m, tiling.d, model_cfg.bias
        encoder = create_encoder(model_cfg, tiling, seed)
        params = cls(
            tiling, model_cfg, encoder,
            w2w=TransformerParams.create(d, model_cfg.heads, rng, bias, dtype),
            w2b_self=init_matrix(rng, m, m, dtype),
            w2b_cnn=init_matrix(rng, m, m, dtype),
            b2b_self=MultiHeadParams.create(d, model_cfg.heads, rng, bias, dtype),
            b2b_cross=TransformerParams.create(d, model_cfg.heads, rng, bias, dtype),
            b2i=init_matrix(rng, n, n, dtype),
            cls=init_matrix(rng, d, model_cfg.num_classes, dtype),
            cls_bias=init_bias(model_cfg.num_classes, dtype) if bias else None,
        )
        if dtype != DEFAULT_DTYPE:
            params = params.astype(dtype)
        return params

    def named_parameters(self):
        items = []
        if self.encoder is not None:
            items += self.encoder.named_tensors(ENCODER_PREFIX)
        items += self.w2w.named_tensors('w2w')
        items += [('w2b.self', self.w2b_self), ('w2b.cnn', self.w2b_cnn)]
        items += self.b2b_self.named_tensors('b2b.self')
        items += self.b2b_cross.named_tensors('b2b.cross')
        items += [('b2i', self.b2i), ('cls', self.cls)]
        if self.cls_bias is not None:
            items.append(('cls_bias', self.cls_bias))
        return OrderedDict(items)

    def parameters(self):
        return list(self.named_parameters().values())

    def __getitem__(self, name):
        return self.named_parameters()[name]

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()

    def grads(self):
        return OrderedDict((name, t.grad) for name, t in self.named_parameters().items())

    def state_dict(self):
        return OrderedDict((name, t.data.copy()) for name, t in self.named_parameters().items())

    def load_state_dict(self, state):
        named = self.named_parameters()
        missing = set(named) - set(state)
        unexpected = set(state) - set(named)
        if missing or unexpected:
            raise ShapeError(f'parameter names differ, missing: {sorted(missing)}, unexpected: {sorted(unexpected)}')
        for name, tensor in named.items():
            value = np.asarray(state[name])
            if list(value.shape) != tensor.dims:
                raise ShapeError(f'parameter {name} has wrong dimensions', value.shape, tensor.dims)
            tensor.data = value.astype(tensor.dtype)
            tensor.grad = None

    def clone(self):
        params = copy.deepcopy(self)
        params.zero_grad()
        return params

    def astype(self, dtype):
        params = self.clone()
        for tensor in params.parameters():
            tensor.data = tensor.data.astype(dtype)
        return params

    def freeze(self):
        """
        Copy with gradient tracking disabled, safe to share across concurrent forward passes
        """
        params = self.clone()
        for tensor in params.parameters():
            tensor.requires_grad = False
        return params


def psi(kind, x):
    """
    Per-row projection R^d -> R over the last axis: L2 norm, L1 norm or mean
    """
    if kind == EUCLIDEAN:
        return l2_rows(x)
    if kind == MANHATTAN:
        return l1_rows(x)
    if kind == MEAN:
        return mean_rows(x)
    raise ConfigError('psi', f'unknown kind "{kind}", choose from {list(PSI_KINDS)}')


def encode_words(encoder, tiled):
    """
    B_cnn: encoder applied to every word of every bag
    :param encoder: WordEncoder, ignored for precomputed features
    :param tiled: TiledImage or WordFeatures
    :return: WordFeatures
    """
    if isinstance(tiled, WordFeatures):
        return tiled
    if encoder is None or not getattr(encoder, 'trainable', True):
        raise ConfigError('encoder', 'word pixels need a pixel encoder, precomputed mode only accepts WordFeatures')
    g = tiled.geometry
    if encoder.out_dim != g.d:
        raise ConfigError('d', f'encoder produces {encoder.out_dim}-d features, configuration expects {g.d}')
    words = tiled.words.data.reshape(g.n * g.m, g.word_px, g.word_px, g.channels)
    return WordFeatures(reshape(encoder.encode(words), (g.n, g.m, g.d)))


def word_to_word(params, b_cnn, residual_norm=False, weights=None):
    """
    Self-attention among the words of a bag (m x d) or of every bag at once (n x m x d), shared parameters
    """
    return transformer_unit(params.attention, params.feed_forward, b_cnn, b_cnn, b_cnn, residual_norm, weights)


def word_to_bag(beta, x, kind):
    """
    softmax(Psi(X) beta) X: convex combination of rows
    :param beta: m x m
    :param x: m x d, or n x m x d for all bags at once
    :return: (bag vector(s) [..., d], coefficients [..., m])
    """
    if x.ndim < 2:
        raise ShapeError('word_to_bag needs rows to combine', x.dims)
    m = x.shape[-2]
    if beta.dims != [m, m]:
        raise ShapeError('aggregation matrix must be m x m', beta.dims, [m, m])
    coeffs = softmax_rows(matmul(psi(kind, x), beta))
    lead = x.shape[:-2]
    bag = matmul(reshape(coeffs, lead + (1, m)), x)
    return reshape(bag, lead + (x.shape[-1],)), coeffs


def bag_to_bag(self_attention, cross, hat_b, bar_b, residual_norm=False, weights=None):
    """
    Self-attention over encoder-branch bags, which then query the word-attention branch bags
    :param hat_b: n x d bags pooled from encoder features
    :param bar_b: n x d bags pooled from word-to-word outputs
    """
    if hat_b.dims != bar_b.dims:
        raise ShapeError('bag branches must have the same dimensions', hat_b.dims, bar_b.dims)
    self_weights = [] if weights is not None else None
    cross_weights = [] if weights is not None else None
    if residual_norm:
        normed = layer_norm_rows(hat_b)
        hat_b2b = add(hat_b, multi_head(self_attention, normed, normed, normed, self_weights))
    else:
        hat_b2b = multi_head(self_attention, hat_b, hat_b, hat_b, self_weights)
    out = transformer_unit(cross.attention, cross.feed_forward, hat_b2b, bar_b, bar_b, residual_norm,
                           cross_weights)
    if weights is not None:
        weights['b2b.self'] = self_weights
        weights['b2b.cross'] = cross_weights
    return out


def bag_to_image(beta_b2i, b_b2b, kind):
    """
    softmax(Psi(B_b2b) beta_b2i) B_b2b
    :return: (image vector [d], bag coefficients [n])
    """
    if b_b2b.ndim != 2:
        raise ShapeError('bag_to_image needs an n x d bag matrix', b_b2b.dims)
    return word_to_bag(beta_b2i, b_b2b, kind)


def classify(beta_cls, image, bias=None):
    if image.ndim != 1 or beta_cls.ndim != 2 or image.shape[0] != beta_cls.shape[0]:
        raise ShapeError('classifier weights must be d x C for a d-vector', image.dims, beta_cls.dims)
    logits = linear(image, beta_cls, bias)
    return Prediction(softmax_rows(logits), logits)


def forward(params, sample, inspect=False):
    """
    Full pipeline for one image
    :param params: HatnetParams
    :param sample: TiledImage or WordFeatures
    :param inspect: keep per-stage attention weights in the record
    :return: (Prediction, AttentionRecord)
    """
    features = encode_words(params.encoder, sample)
    n, m, d = params.tiling.n, params.tiling.m, params.tiling.d
    if features.b_cnn.dims != [n, m, d]:
        raise ShapeError('word features do not match configuration', features.b_cnn.dims, [n, m, d])
    kind = params.model_cfg.psi
    residual_norm = params.model_cfg.residual_norm
    weights = {} if inspect else None
    w2w_weights = [] if inspect else None

    b_cnn = features.b_cnn
    b_w2w = word_to_word(params.w2w, b_cnn, residual_norm, w2w_weights)
    bar_b, word_coeffs = word_to_bag(params.w2b_self, b_w2w, kind)
    hat_b, cnn_coeffs = word_to_bag(params.w2b_cnn, b_cnn, kind)
    b_b2b = bag_to_bag(params.b2b_self, params.b2b_cross, hat_b, bar_b, residual_norm, weights)
    image, bag_coeffs = bag_to_image(params.b2i, b_b2b, kind)
    prediction = classify(params.cls, image, params.cls_bias)

    if inspect:
        weights['w2w'] = [Tensor(w.data) for w in w2w_weights]
        weights['b2b.self'] = [Tensor(w.data) for w in weights['b2b.self']]
        weights['b2b.cross'] = [Tensor(w.data) for w in weights['b2b.cross']]
    record = AttentionRecord(word_coeffs=Tensor(word_coeffs.data), bag_coeffs=Tensor(bag_coeffs.data),
                             cnn_word_coeffs=Tensor(cnn_coeffs.data), stage_weights=weights)
    return prediction, record


def loss(params, sample, label):
    """
    Cross-entropy of one sample through the fused log-sum-exp path
    :return: (loss tensor, Prediction, AttentionRecord)
    """
    prediction, record = forward(params, sample)
    return cross_entropy_logits(prediction.logits, label), prediction, record


def predict(params, sample):
    with no_grad():
        return forward(params, sample)


def _top_count(k_percent, total):
    if not 0 < k_percent <= 100:
        raise ContractError(f'k_percent must be in (0, 100], got {k_percent}')
    return min(total, math.ceil(round(k_percent * total / 100.0, 9)))


def _rank(values):
    # stable sort on negated values keeps lower indices first among ties
    return np.argsort(-np.asarray(values, dtype=np.float64), kind='stable')


def top_k_bags(record, k_percent):
    coeffs = record.bag_coeffs.data.reshape(-1)
    count = _top_count(k_percent, coeffs.size)
    return [int(i) for i in _rank(coeffs)[:count]]


def top_k_words(record, k_percent):
    """
    Words ranked globally across the image by their word-to-bag coefficients
    :return: list of (bag, word) pairs
    """
    coeffs = record.word_coeffs.data
    m = coeffs.shape[-1]
    flat = coeffs.reshape(-1)
    count = _top_count(k_percent, flat.size)
    return [(int(i) // m, int(i) % m) for i in _rank(flat)[:count]]


def count_parameters(params):
    encoder = 0
    attention = 0
    for name, tensor in params.named_parameters().items():
        if name.startswith(ENCODER_PREFIX + '.'):
            encoder += tensor.size
        else:
            attention += tensor.size
    return {'encoder': encoder, 'attention': attention, 'total': encoder + attention}


def ensemble_predict(members, sample):
    """
    Majority vote over member predictions, ties go to the lower class index; probabilities are averaged
    """
    if not members:
        raise ContractError('ensemble needs at least one member')
    predictions = [predict(params, sample)[0] for params in members]
    votes = Counter(p.predicted_class for p in predictions)
    top = max(votes.values())
    winner = min(label for label, count in votes.items() if count == top)
    probs = np.mean([p.probs.data.astype(np.float64) for p in predictions], axis=0)
    return Prediction(Tensor(probs), predicted_class=winner)
