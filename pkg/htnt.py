"""
HTNT binary tensor files.

Layout (little-endian, no padding):
    magic "HTNT" | version 0x01 | dtype 0x00 (float32) | rank (1 byte) | rank x uint32 extents | float32 payload
"""
import os
import struct

import numpy as np

from errors import FormatError
from tensor import Tensor

MAGIC = b'HTNT'
VERSION = 0x01
DTYPE_FLOAT32 = 0x00
EXTENSION = '.htnt'
_HEADER = struct.Struct('<4sBBB')


def encode(value):
    """
    Serialize a Tensor or array-like to HTNT bytes (always float32 payload)
    """
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    array = np.ascontiguousarray(array, dtype='<f4')
    if array.ndim > 255:
        raise FormatError(f'rank {array.ndim} does not fit in one byte')
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, array.ndim)
    extents = struct.pack(f'<{array.ndim}I', *array.shape)
    return header + extents + array.tobytes(order='C')


def decode(payload):
    if len(payload) < _HEADER.size:
        raise FormatError('HTNT payload shorter than header')
    magic, version, dtype, rank = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise FormatError(f'bad magic {magic!r}')
    if version != VERSION:
        raise FormatError(f'unsupported HTNT version {version}')
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f'unsupported dtype code {dtype}')
    offset = _HEADER.size
    if len(payload) < offset + 4 * rank:
        raise FormatError('HTNT payload truncated inside extents')
    dims = struct.unpack_from(f'<{rank}I', payload, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(payload) != offset + 4 * count:
        raise FormatError(f'HTNT payload has {len(payload) - offset} data bytes, expected {4 * count} for {list(dims)}')
    data = np.frombuffer(payload, dtype='<f4', count=count, offset=offset)
    return data.reshape(dims).astype(np.float32)


def save(path, value):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'wb') as out_file:
        out_file.write(encode(value))


def load_array(path):
    with open(path, 'rb') as in_file:
        return decode(in_file.read())


def load(path, requires_grad=False):
    return Tensor(load_array(path), requires_grad=requires_grad)
