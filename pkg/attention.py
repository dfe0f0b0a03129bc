"""
Transformer unit: multi-head attention followed by a two-layer feed forward network.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from errors import ConfigError, ShapeError
from tensor import Tensor, DEFAULT_DTYPE, matmul, softmax_rows, scale, relu, add, concat_last_dim, linear, \
    transpose, layer_norm_rows

FFN_EXPANSION = 4


def init_matrix(rng, rows, cols, dtype=DEFAULT_DTYPE):
    """
    Uniform in [-1/sqrt(rows), 1/sqrt(rows)], rows being the fan-in of x @ W
    """
    bound = 1.0 / math.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True, dtype=dtype)


def init_bias(cols, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(cols), requires_grad=True, dtype=dtype)


@dataclass
class MultiHeadParams:
    query: List[Tensor]
    key: List[Tensor]
    value: List[Tensor]
    out: Tensor
    query_bias: Optional[List[Tensor]] = None
    key_bias: Optional[List[Tensor]] = None
    value_bias: Optional[List[Tensor]] = None
    out_bias: Optional[Tensor] = None

    def __post_init__(self):
        heads = len(self.query)
        if heads == 0 or len(self.key) != heads or len(self.value) != heads:
            raise ConfigError('heads', f'query/key/value projection counts differ: '
                                       f'{len(self.query)}/{len(self.key)}/{len(self.value)}')
        d = self.out.shape[0]
        if d % heads != 0:
            raise ConfigError('heads', f'model dimension {d} is not divisible by {heads} heads')
        head_dim = d // heads
        for projection in self.query + self.key + self.value:
            if projection.dims != [d, head_dim]:
                raise ShapeError('head projection must be d x d_h', projection.dims, [d, head_dim])
        if self.out.dims != [d, d]:
            raise ShapeError('output fusion must be d x d', self.out.dims, [d, d])

    @property
    def heads(self):
        return len(self.query)

    @property
    def d(self):
        return self.out.shape[0]

    @property
    def head_dim(self):
        return self.d // self.heads

    @classmethod
    def create(cls, d, heads, rng, bias=False, dtype=DEFAULT_DTYPE):
        if heads <= 0 or d % heads != 0:
            raise ConfigError('heads', f'model dimension {d} is not divisible by {heads} heads')
        head_dim = d // heads
        params = cls(
            query=[init_matrix(rng, d, head_dim, dtype) for _ in range(heads)],
            key=[init_matrix(rng, d, head_dim, dtype) for _ in range(heads)],
            value=[init_matrix(rng, d, head_dim, dtype) for _ in range(heads)],
            out=init_matrix(rng, d, d, dtype),
        )
        if bias:
            params.query_bias = [init_bias(head_dim, dtype) for _ in range(heads)]
            params.key_bias = [init_bias(head_dim, dtype) for _ in range(heads)]
            params.value_bias = [init_bias(head_dim, dtype) for _ in range(heads)]
            params.out_bias = init_bias(d, dtype)
        return params

    def named_tensors(self, prefix):
        items = []
        for role in ('query', 'key', 'value'):
            for i, projection in enumerate(getattr(self, role)):
                items.append((f'{prefix}.{role}.{i}', projection))
        items.append((f'{prefix}.out', self.out))
        if self.out_bias is not None:
            for role in ('query', 'key', 'value'):
                for i, bias in enumerate(getattr(self, f'{role}_bias')):
                    items.append((f'{prefix}.{role}_bias.{i}', bias))
            items.append((f'{prefix}.out_bias', self.out_bias))
        return items


@dataclass
class FfnParams:
    expand: Tensor
    reduce: Tensor
    expand_bias: Optional[Tensor] = None
    reduce_bias: Optional[Tensor] = None

    def __post_init__(self):
        d = self.expand.shape[0]
        if self.expand.dims != [d, FFN_EXPANSION * d]:
            raise ShapeError('FFN expansion must be d x 4d', self.expand.dims, [d, FFN_EXPANSION * d])
        if self.reduce.dims != [FFN_EXPANSION * d, d]:
            raise ShapeError('FFN reduction must be 4d x d', self.reduce.dims, [FFN_EXPANSION * d, d])

    @property
    def d(self):
        return self.expand.shape[0]

    @classmethod
    def create(cls, d, rng, bias=False, dtype=DEFAULT_DTYPE):
        params = cls(expand=init_matrix(rng, d, FFN_EXPANSION * d, dtype),
                     reduce=init_matrix(rng, FFN_EXPANSION * d, d, dtype))
        if bias:
            params.expand_bias = init_bias(FFN_EXPANSION * d, dtype)
            params.reduce_bias = init_bias(d, dtype)
        return params

    def named_tensors(self, prefix):
        items = [(f'{prefix}.expand', self.expand), (f'{prefix}.reduce', self.reduce)]
        if self.expand_bias is not None:
            items += [(f'{prefix}.expand_bias', self.expand_bias), (f'{prefix}.reduce_bias', self.reduce_bias)]
        return items


def scaled_dot_product(q, k, v):
    """
    softmax(Q K^T / sqrt(d_h)) V over the last two axes
    :return: (output, attention weights)
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError('query and key head dimensions differ', q.dims, k.dims)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError('keys and values must have the same count', k.dims, v.dims)
    weights = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1])))
    return matmul(weights, v), weights


def multi_head(params, x_q, x_k, x_v, weights=None):
    """
    Concat(head_1..head_H) beta_mha with head_i = A(X_Q beta_Q^i, X_K beta_K^i, X_V beta_V^i)
    :param weights: optional list that receives each head's attention weights
    """
    d = params.d
    for name, x in (('X_Q', x_q), ('X_K', x_k), ('X_V', x_v)):
        if x.ndim < 2 or x.shape[-1] != d:
            raise ShapeError(f'{name} feature dimension must be {d}', x.dims)
    if x_k.shape[-2] != x_v.shape[-2]:
        raise ShapeError('X_K and X_V must have the same number of rows', x_k.dims, x_v.dims)

    heads = []
    for i in range(params.heads):
        q = linear(x_q, params.query[i], params.query_bias[i] if params.query_bias else None)
        k = linear(x_k, params.key[i], params.key_bias[i] if params.key_bias else None)
        v = linear(x_v, params.value[i], params.value_bias[i] if params.value_bias else None)
        head, head_weights = scaled_dot_product(q, k, v)
        if weights is not None:
            weights.append(head_weights)
        heads.append(head)
    return linear(concat_last_dim(heads), params.out, params.out_bias)


def ffn(params, x):
    """
    ReLU(X beta_E) beta_R
    """
    if x.shape[-1] != params.d:
        raise ShapeError(f'FFN input feature dimension must be {params.d}', x.dims)
    return linear(relu(linear(x, params.expand, params.expand_bias)), params.reduce, params.reduce_bias)


def transformer_unit(mh, ffn_params, x_q, x_k, x_v, residual_norm=False, weights=None):
    """
    FFN(MultiHead(X_Q, X_K, X_V)); with residual_norm, pre-norm residual wiring around both blocks
    """
    if not residual_norm:
        return ffn(ffn_params, multi_head(mh, x_q, x_k, x_v, weights))
    hidden = add(x_q, multi_head(mh, layer_norm_rows(x_q), layer_norm_rows(x_k), layer_norm_rows(x_v), weights))
    return add(hidden, ffn(ffn_params, layer_norm_rows(hidden)))


@dataclass
class TransformerParams:
    attention: MultiHeadParams
    feed_forward: FfnParams

    @classmethod
    def create(cls, d, heads, rng, bias=False, dtype=DEFAULT_DTYPE):
        return cls(MultiHeadParams.create(d, heads, rng, bias, dtype), FfnParams.create(d, rng, bias, dtype))

    def named_tensors(self, prefix):
        return self.attention.named_tensors(f'{prefix}.mha') + self.feed_forward.named_tensors(f'{prefix}.ffn')

    def __call__(self, x_q, x_k, x_v, residual_norm=False, weights=None):
        return transformer_unit(self.attention, self.feed_forward, x_q, x_k, x_v, residual_norm, weights)
