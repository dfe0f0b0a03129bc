import numpy as np

from attention import init_matrix, init_bias
from tensor import Tensor, DEFAULT_DTYPE, linear, relu, reshape, transpose, mean_axis
from .base_encoder import WordEncoder

DEFAULT_KERNEL = 4
DEFAULT_HIDDEN = (8, 16)
POOL_BLOCK = 2


def unfold_patches(words, kernel):
    """
    Non-overlapping kernel x kernel patches of every word, flattened row-major
    :param words: N x px x px x c
    :return: (N * g * g) x (kernel * kernel * c) array, g = px / kernel
    """
    count, px, _, channels = words.shape
    grid = px // kernel
    patches = words.reshape(count, grid, kernel, grid, kernel, channels).transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(count * grid * grid, kernel * kernel * channels)


class ToyWordEncoder(WordEncoder):
    """
    Two strided patch-convolution stages with ReLU, global average pooling and a linear projection to d.

    Stage 1 embeds non-overlapping kernel x kernel pixel patches, stage 2 merges 2 x 2 neighbourhoods of
    stage 1 outputs. word_px must be divisible by 2 * kernel.
    """

    def __init__(self, d, word_px, channels=1, kernel=DEFAULT_KERNEL, hidden=DEFAULT_HIDDEN, seed=0, bias=False,
                 dtype=DEFAULT_DTYPE):
        super().__init__(d)
        if word_px % (kernel * POOL_BLOCK) != 0:
            raise ValueError(f'word_px ({word_px}) must be divisible by {kernel * POOL_BLOCK}')
        self.word_px = word_px
        self.channels = channels
        self.kernel = kernel
        self.hidden = tuple(hidden)
        self.seed = seed
        self.bias = bias
        rng = np.random.default_rng(seed)
        first, second = self.hidden
        self.stage1 = init_matrix(rng, kernel * kernel * channels, first, dtype)
        self.stage2 = init_matrix(rng, POOL_BLOCK * POOL_BLOCK * first, second, dtype)
        self.projection = init_matrix(rng, second, d, dtype)
        self.stage1_bias = init_bias(first, dtype) if bias else None
        self.stage2_bias = init_bias(second, dtype) if bias else None
        self.projection_bias = init_bias(d, dtype) if bias else None

    def named_tensors(self, prefix):
        items = [(f'{prefix}.stage1', self.stage1), (f'{prefix}.stage2', self.stage2),
                 (f'{prefix}.projection', self.projection)]
        if self.bias:
            items += [(f'{prefix}.stage1_bias', self.stage1_bias), (f'{prefix}.stage2_bias', self.stage2_bias),
                      (f'{prefix}.projection_bias', self.projection_bias)]
        return items

    def encode(self, words):
        words = np.asarray(words)
        if words.ndim != 4 or words.shape[1:] != (self.word_px, self.word_px, self.channels):
            raise ValueError(f'Expected words of shape N x {self.word_px} x {self.word_px} x {self.channels}, '
                             f'got {list(words.shape)}')
        count = words.shape[0]
        grid = self.word_px // self.kernel
        half = grid // POOL_BLOCK
        first, second = self.hidden

        patches = Tensor(unfold_patches(words, self.kernel), dtype=self.stage1.dtype)
        stage1 = relu(linear(patches, self.stage1, self.stage1_bias))
        stage1 = reshape(stage1, (count, half, POOL_BLOCK, half, POOL_BLOCK, first))
        stage1 = transpose(stage1, (0, 1, 3, 2, 4, 5))
        stage1 = reshape(stage1, (count * half * half, POOL_BLOCK * POOL_BLOCK * first))
        stage2 = relu(linear(stage1, self.stage2, self.stage2_bias))
        pooled = mean_axis(reshape(stage2, (count, half * half, second)), 1)
        return linear(pooled, self.projection, self.projection_bias)

    def describe(self):
        return {'d': self.d, 'word_px': self.word_px, 'channels': self.channels, 'kernel': self.kernel,
                'hidden': list(self.hidden), 'seed': self.seed, 'bias': self.bias}
