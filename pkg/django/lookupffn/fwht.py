'''
Fast Walsh-Hadamard transform.

The transform is unnormalized and uses the Sylvester (natural) ordering, i.e.
    H[i][j] = (-1) ** popcount(i & j). Normalization, where needed, is folded
    into the parameters that surround H.
'''
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from lookupffn.exceptions import SizeError, ensure_finite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HadamardOrder:
    n: int
    log2n: int

    def __post_init__(self):
        if self.n < 1 or self.n != 1 << self.log2n:
            raise SizeError(
                'Hadamard order must be a power of two, got {}'.format(self.n))

    @classmethod
    def for_length(cls, n):
        n = int(n)
        if n < 1 or n & (n - 1):
            raise SizeError(
                'Hadamard order must be a power of two, got {}'.format(n))
        return cls(n=n, log2n=n.bit_length() - 1)


def next_power_of_two(n):
    return 1 << max(int(n) - 1, 0).bit_length()


def _order_for(v, order):
    if order is None:
        return HadamardOrder.for_length(v.shape[-1])
    if v.shape[-1] != order.n:
        raise SizeError('vector length {} does not match Hadamard order {}'.format(
            v.shape[-1], order.n))
    return order


def fwht_inplace(v, order=None, counter=None):
    '''
    Replaces every row of v (the last axis) by H.v using n*log2(n) additions.

    v must be a C-contiguous float array; it is modified in place and returned.
    '''
    order = _order_for(v, order)
    if not v.flags.c_contiguous:
        raise SizeError('fwht_inplace needs a C-contiguous buffer')
    ensure_finite(v, 'fwht')
    n = order.n
    rows = v.size // n if n else 0
    h = 1
    while h < n:
        # pairs (j, j + h) inside every block of 2h consecutive entries
        x = v.reshape(-1, 2, h)
        upper = x[:, 0, :].copy()
        x[:, 0, :] += x[:, 1, :]
        np.subtract(upper, x[:, 1, :], out=x[:, 1, :])
        h *= 2
    if counter is not None:
        counter.add('hash', rows * n * order.log2n)
    return v


def fwht_rows(matrix, threads=1, counter=None):
    '''
    Batched transform: applies fwht_inplace to each row of a 2-D array, in
        chunks of rows spread over a thread pool when threads > 1.
    '''
    matrix = np.ascontiguousarray(matrix)
    order = HadamardOrder.for_length(matrix.shape[-1])
    if threads <= 1 or matrix.shape[0] < 2 * threads:
        return fwht_inplace(matrix, order, counter=counter)

    chunks = np.array_split(np.arange(matrix.shape[0]), threads)

    def work(index):
        block = np.ascontiguousarray(matrix[index])
        fwht_inplace(block, order)
        matrix[index] = block

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, [c for c in chunks if len(c)]))
    if counter is not None:
        counter.add('hash', matrix.shape[0] * order.n * order.log2n)
    return matrix


def hadamard_matrix(order):
    # dense Sylvester matrix, test oracle only
    H = np.ones((1, 1))
    base = np.array([[1.0, 1.0], [1.0, -1.0]])
    for _ in range(order.log2n):
        H = np.kron(H, base)
    return H


def naive_hadamard_matmul(v, order=None):
    '''
    Materializes H densely and multiplies; O(n^2). Rows of a 2-D input are
        transformed independently (H is symmetric).
    '''
    v = np.asarray(v, dtype=np.float64)
    order = _order_for(v, order)
    ensure_finite(v, 'hadamard')
    return v @ hadamard_matrix(order)
