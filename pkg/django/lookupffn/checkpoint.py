'''
Binary parameter checkpoint of a LookupFFN layer.

Layout, little-endian:
    magic b'LFFN', version u32, d_in u32, d_out u32, h u32, tau u32,
    variant u8, projection kind u8, m u32, b u32
followed by float64 blobs in row-major order: the projection arrays, then T.

For acdc m holds the depth k and b is 0; dense and signflip store 0 for both.
    neighbor_count is not stored.
'''
import logging
import struct
from pathlib import Path

import numpy as np

from lookupffn.exceptions import CheckpointError, ConfigError, SizeError
from lookupffn.lookup_core import VARIANTS, HashTables, LookupConfig, LookupFFN
from lookupffn.structured_proj import (
    KINDS, ACDCParams, BHParams, DenseParams, Projection, ProjectionSpec,
    ShuffleParams, SignFlipParams,)

logger = logging.getLogger(__name__)

MAGIC = b'LFFN'
VERSION = 1
HEADER = struct.Struct('<4sIIIIIBBII')
BLOB_DTYPE = np.dtype('<f8')


def _blobs(params):
    # signflip signs are fixed but still needed to rebuild the projection
    if isinstance(params, SignFlipParams):
        return [params.signs]
    return list(params.arrays().values())


def _depth_and_block(params):
    if isinstance(params, BHParams):
        return params.m, params.b
    if isinstance(params, ACDCParams):
        return params.k, 0
    return 0, 0


def save_checkpoint(model, path):
    '''Writes `model` to `path` and returns the number of bytes written.'''
    cfg, spec = model.cfg, model.spec
    m, b = _depth_and_block(model.projection.params)
    header = HEADER.pack(
        MAGIC, VERSION, cfg.d_in, cfg.d_out, cfg.h, cfg.tau,
        VARIANTS.index(cfg.variant), KINDS.index(spec.kind), m, b,
    )
    blobs = _blobs(model.projection.params) + [model.tables.T]
    with open(path, 'wb') as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(np.ascontiguousarray(blob, dtype=BLOB_DTYPE).tobytes())
    size = Path(path).stat().st_size
    logger.info('saved checkpoint %s (%d bytes)', path, size)
    return size


def read_header(data):
    if len(data) < HEADER.size:
        raise CheckpointError('file is shorter than the {}-byte header'.format(HEADER.size))
    magic, version, d_in, d_out, h, tau, variant, kind, m, b = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError('bad magic {!r}'.format(magic))
    if version != VERSION:
        raise CheckpointError('unsupported checkpoint version {}'.format(version))
    if variant >= len(VARIANTS) or kind >= len(KINDS):
        raise CheckpointError('unknown variant or projection index')
    return {
        'version': version, 'd_in': d_in, 'd_out': d_out, 'h': h, 'tau': tau,
        'variant': VARIANTS[variant], 'kind': KINDS[kind], 'm': m, 'b': b,
    }


def _shapes(kind, spec, m, b):
    D = spec.D
    if kind in ('bh', 'shuffle'):
        if not b or D % b:
            raise CheckpointError('block size {} does not divide D={}'.format(b, D))
        return [(m, D // b, b, b)]
    if kind == 'acdc':
        return [(m, D), (m, D)]
    if kind == 'signflip':
        return [(3, D)]
    return [(spec.d_in, spec.d_out)]


def _params(kind, spec, m, b, arrays):
    if kind == 'bh':
        return BHParams(D=spec.D, m=m, b=b, stages=arrays[0])
    if kind == 'shuffle':
        return ShuffleParams(D=spec.D, m=m, b=b, stages=arrays[0])
    if kind == 'acdc':
        return ACDCParams(D=spec.D, k=m, diag_a=arrays[0], diag_d=arrays[1])
    if kind == 'signflip':
        return SignFlipParams(D=spec.D, signs=arrays[0])
    return DenseParams(R=arrays[0])


def load_checkpoint(path, neighbor_count=1):
    '''
    Reads a checkpoint written by save_checkpoint. tau1 variants always use
        both codes; other variants take `neighbor_count`.
    '''
    data = Path(path).read_bytes()
    header = read_header(data)
    try:
        if header['variant'].endswith('tau1'):
            neighbor_count = 2
        cfg = LookupConfig(
            d_in=header['d_in'], d_out=header['d_out'], h=header['h'],
            tau=header['tau'], variant=header['variant'],
            neighbor_count=neighbor_count,
        )
        spec = ProjectionSpec(cfg.d_in, cfg.code_width, header['kind'])
    except (ConfigError, SizeError) as exc:
        raise CheckpointError('invalid header: {}'.format(exc))

    shapes = _shapes(header['kind'], spec, header['m'], header['b'])
    shapes.append((cfg.h, cfg.table_size, cfg.d_out))
    offset = HEADER.size
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape)) * BLOB_DTYPE.itemsize
        if offset + size > len(data):
            raise CheckpointError('checkpoint is truncated')
        blob = np.frombuffer(data, dtype=BLOB_DTYPE, count=size // 8, offset=offset)
        arrays.append(blob.reshape(shape).astype(np.float64))
        offset += size
    if offset != len(data):
        raise CheckpointError('{} unexpected trailing bytes'.format(len(data) - offset))

    try:
        params = _params(header['kind'], spec, header['m'], header['b'], arrays[:-1])
        model = LookupFFN(cfg, Projection(spec=spec, params=params), HashTables(arrays[-1]))
    except (ConfigError, SizeError) as exc:
        raise CheckpointError('inconsistent checkpoint: {}'.format(exc))
    logger.info('loaded checkpoint %s', path)
    return model
