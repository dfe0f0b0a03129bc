"""
Dense tensor engine with tape-based reverse-mode automatic differentiation.

Buffers are stored as 32-bit floats (64-bit when a tensor is explicitly cast for
precise gradient checks); matrix products and reductions accumulate in 64 bits.
"""
import contextlib
import threading

import numpy as np

from common.utils import get_logger
from errors import ShapeError, ContractError, NonFiniteError

DEFAULT_DTYPE = np.float32
ACCUM_DTYPE = np.float64
FLOAT_DTYPES = (np.float32, np.float64)
CE_EPSILON = 1e-12
LN_EPSILON = 1e-5

log = get_logger('Tensor')
_state = threading.local()


def grad_enabled():
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """
    Disable tape recording in current thread, used for inference and evaluation
    """
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in FLOAT_DTYPES else DEFAULT_DTYPE
        array = np.array(array, dtype=dtype)
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError('Tensor extents must be positive', array.shape)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError('Tensor data contains NaN or Inf')
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        dtype = np.result_type(*[p.data.dtype for p in parents])
        data = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f'Operation "{op}" produced non-finite values')
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f'item() needs a single element tensor, got dims {self.dims}')
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def accumulate_grad(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError('Gradient shape differs from tensor shape', grad.shape, self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def __repr__(self):
        return f'Tensor(dims={self.dims}, dtype={self.dtype}, requires_grad={self.requires_grad}, op={self.op})'

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(value, dtype=DEFAULT_DTYPE):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(dims, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(dims), requires_grad=requires_grad, dtype=dtype)


def ones(dims, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.ones(dims), requires_grad=requires_grad, dtype=dtype)


class Tape:
    """
    Ordered record of the operations that produced an output, parents always before consumers.
    Rebuilt from the output on every backward pass.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, output):
        nodes = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def run(self, seed):
        pending = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.accumulate_grad(grad)
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


def backward(loss):
    """
    Populate .grad of every requires_grad leaf that contributed to loss, adding to existing buffers
    :param loss: scalar tensor produced through recorded ops
    :return: the tape that was replayed
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        dims = loss.dims if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f'backward() needs a scalar loss, got {dims}')
    if not loss.requires_grad:
        raise ContractError('backward() called on a tensor that was not produced through recorded ops')
    tape = Tape.record(loss)
    tape.run(np.ones(loss.shape, dtype=ACCUM_DTYPE))
    return tape


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_dims(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'{op}: dimensions do not broadcast', a.dims, b.dims)


def add(a, b):
    _broadcast_dims(a, b, 'add')

    def _backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward, 'add')


def sub(a, b):
    _broadcast_dims(a, b, 'sub')

    def _backward(grad):
        return _unbroadcast(grad, a.shape), -_unbroadcast(grad, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward, 'sub')


def mul(a, b):
    _broadcast_dims(a, b, 'mul')

    def _backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), _backward, 'mul')


def scale(x, c):
    c = float(c)

    def _backward(grad):
        return (grad * c,)

    return Tensor._from_op(x.data * c, (x,), _backward, 'scale')


def relu(x):
    mask = x.data > 0

    def _backward(grad):
        return (grad * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0), (x,), _backward, 'relu')


def reshape(x, dims):
    dims = tuple(dims)

    def _backward(grad):
        return (grad.reshape(x.shape),)

    try:
        data = x.data.reshape(dims)
    except ValueError:
        raise ShapeError('reshape: element count differs', x.dims, dims)
    return Tensor._from_op(data, (x,), _backward, 'reshape')


def transpose(x, axes=None):
    if axes is None:
        if x.ndim < 2:
            raise ShapeError('transpose needs at least 2 dimensions', x.dims)
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(grad):
        return (np.transpose(grad, inverse),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), _backward, 'transpose')


def matmul(a, b):
    """
    Matrix product over the last two axes, leading axes broadcast. 1-D operands are treated as a
    single row (left) or column (right) and the extra axis is dropped from the result.
    """
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError('matmul needs at least 1-D operands', a.dims, b.dims)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul: inner dimensions differ', a.dims, b.dims)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError('matmul: batch dimensions do not broadcast', a.dims, b.dims)

    a64 = a.data.astype(ACCUM_DTYPE)
    b64 = b.data.astype(ACCUM_DTYPE)

    def _backward(grad):
        grad = np.asarray(grad, dtype=ACCUM_DTYPE)
        grad_a = _unbroadcast(np.matmul(grad, np.swapaxes(b64, -1, -2)), a.shape)
        grad_b = _unbroadcast(np.matmul(np.swapaxes(a64, -1, -2), grad), b.shape)
        return grad_a, grad_b

    return Tensor._from_op(np.matmul(a64, b64), (a, b), _backward, 'matmul')


def softmax_rows(x):
    """
    Softmax over the last axis with per-row max subtraction
    """
    shifted = x.data.astype(ACCUM_DTYPE) - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def _backward(grad):
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(probs, (x,), _backward, 'softmax')


def log_softmax_rows(x):
    shifted = x.data.astype(ACCUM_DTYPE) - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _backward(grad):
        return (grad - probs * grad.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), _backward, 'log_softmax')


def concat_last_dim(tensors):
    if not tensors:
        raise ShapeError('concat_last_dim needs at least one tensor')
    outer = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or t.shape[:-1] != outer:
            raise ShapeError('concat_last_dim: outer dimensions differ', tensors[0].dims, t.dims)
    bounds = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def _backward(grad):
        return tuple(np.split(grad, bounds, axis=-1))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), _backward,
                           'concat')


def index_rows(x, index):
    """
    Select x[index] along the first axis
    """
    if x.ndim == 0:
        raise ShapeError('index_rows needs at least 1-D tensor', x.dims)
    if not 0 <= index < x.shape[0]:
        raise IndexError(f'index {index} out of range for first dimension {x.shape[0]}')

    def _backward(grad):
        full = np.zeros(x.shape, dtype=ACCUM_DTYPE)
        full[index] = grad
        return (full,)

    return Tensor._from_op(x.data[index], (x,), _backward, 'index_rows')


def stack_rows(tensors):
    if not tensors:
        raise ShapeError('stack_rows needs at least one tensor')
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError('stack_rows: dimensions differ', tensors[0].dims, t.dims)

    def _backward(grad):
        return tuple(grad[i] for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors]), tuple(tensors), _backward, 'stack')


def sum_all(x):
    total = x.data.astype(ACCUM_DTYPE).sum()

    def _backward(grad):
        return (np.broadcast_to(grad, x.shape),)

    return Tensor._from_op(total, (x,), _backward, 'sum')


def mean_axis(x, axis):
    count = x.shape[axis]

    def _backward(grad):
        return (np.broadcast_to(np.expand_dims(grad, axis), x.shape) / count,)

    return Tensor._from_op(x.data.astype(ACCUM_DTYPE).mean(axis=axis), (x,), _backward, 'mean_axis')


def l2_rows(x):
    """
    Euclidean norm of each row (last axis); the subgradient at a zero row is zero
    """
    x64 = x.data.astype(ACCUM_DTYPE)
    norms = np.sqrt((x64 * x64).sum(axis=-1))

    def _backward(grad):
        safe = np.where(norms > 0, norms, 1.0)
        return (np.expand_dims(np.where(norms > 0, grad / safe, 0.0), -1) * x64,)

    return Tensor._from_op(norms, (x,), _backward, 'l2_rows')


def l1_rows(x):
    x64 = x.data.astype(ACCUM_DTYPE)

    def _backward(grad):
        return (np.expand_dims(grad, -1) * np.sign(x64),)

    return Tensor._from_op(np.abs(x64).sum(axis=-1), (x,), _backward, 'l1_rows')


def mean_rows(x):
    return mean_axis(x, -1)


def layer_norm_rows(x, eps=LN_EPSILON):
    """
    Parameter-free normalization of each row to zero mean and unit variance
    """
    x64 = x.data.astype(ACCUM_DTYPE)
    centered = x64 - x64.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def _backward(grad):
        return (inv_std * (grad - grad.mean(axis=-1, keepdims=True)
                           - normed * (grad * normed).mean(axis=-1, keepdims=True)),)

    return Tensor._from_op(normed, (x,), _backward, 'layer_norm')


def _check_label(label, num_classes):
    if isinstance(label, bool) or not isinstance(label, (int, np.integer)):
        raise IndexError(f'label must be an integer class index, got {label!r}')
    if not 0 <= label < num_classes:
        raise IndexError(f'label {label} out of range for {num_classes} classes')
    return int(label)


def cross_entropy_logits(logits, label):
    """
    -log softmax(logits)[label] computed as a fused log-sum-exp
    """
    if logits.ndim != 1:
        raise ShapeError('cross_entropy_logits needs a 1-D logit vector', logits.dims)
    label = _check_label(label, logits.shape[0])
    z = logits.data.astype(ACCUM_DTYPE)
    top = z.max()
    lse = top + np.log(np.exp(z - top).sum())
    probs = np.exp(z - lse)

    def _backward(grad):
        one_hot = np.zeros_like(probs)
        one_hot[label] = 1.0
        return (grad * (probs - one_hot),)

    return Tensor._from_op(lse - z[label], (logits,), _backward, 'cross_entropy')


def cross_entropy(probs, label, eps=CE_EPSILON):
    """
    -log(probs[label]) with probs clamped below by eps
    :param probs: probability vector summing to 1
    :param label: class index
    :return: scalar tensor
    """
    if probs.ndim != 1:
        raise ShapeError('cross_entropy needs a 1-D probability vector', probs.dims)
    label = _check_label(label, probs.shape[0])
    total = probs.data.astype(ACCUM_DTYPE).sum()
    if abs(total - 1.0) > 1e-5:
        raise ContractError(f'cross_entropy probabilities sum to {total}, expected 1')
    p = float(probs.data[label])
    clamped = max(p, eps)

    def _backward(grad):
        out = np.zeros(probs.shape, dtype=ACCUM_DTYPE)
        if p > eps:
            out[label] = -grad / p
        return (out,)

    return Tensor._from_op(-np.log(clamped), (probs,), _backward, 'cross_entropy_probs')


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def finite_diff_grad(f, x, eps=1e-3):
    """
    Central finite differences of a scalar function, evaluated in 64-bit precision
    :param f: callable taking a Tensor and returning a scalar Tensor or float
    :param x: point to differentiate at
    :param eps: step, must be positive
    :return: Tensor with x's dims holding df/dx
    """
    if eps <= 0:
        raise ContractError(f'eps must be positive, got {eps}')
    base = x.data.astype(ACCUM_DTYPE)
    grad = np.zeros(base.shape, dtype=ACCUM_DTYPE)
    with no_grad():
        for index in np.ndindex(base.shape):
            plus = base.copy()
            plus[index] += eps
            minus = base.copy()
            minus[index] -= eps
            grad[index] = (_scalar(f(Tensor(plus, dtype=ACCUM_DTYPE)))
                           - _scalar(f(Tensor(minus, dtype=ACCUM_DTYPE)))) / (2 * eps)
    return Tensor(grad, dtype=ACCUM_DTYPE)


def _scalar(value):
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def relative_error(analytic, numeric, floor=1e-3):
    """
    max |a - n| / max(|a|, |n|, floor) over all elements; floor keeps vanishing entries from
    dominating the ratio
    """
    a = np.asarray(analytic, dtype=ACCUM_DTYPE)
    n = np.asarray(numeric, dtype=ACCUM_DTYPE)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
