'''
Forward-only latency microbenchmark of LookupFFN against the dense FFN.

Parameters and inputs are built before the timed region; every repetition
    times one forward pass with a monotonic nanosecond clock. For LookupFFN the
    hash and gather stages are also timed on their own.
'''
import logging
import time
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from lookupffn import flop_model
from lookupffn.baselines import init_ffn, vanilla_ffn_forward
from lookupffn.conf import get_setting
from lookupffn.exceptions import ConfigError, UsageError
from lookupffn.lookup_core import LookupConfig, LookupFFN, lookup_gather, lookup_hash

logger = logging.getLogger(__name__)

KERNELS = ('portable', 'sorted')


@dataclass(frozen=True)
class BenchSpec:
    '''
    Args:
        rows - effective batch, i.e. batch size times sequence length
        layer - (d_in, t, d_out) of a dense FFN or a LookupConfig
        projection, m, b - hash projection of a LookupConfig layer
    '''
    rows: int
    layer: object
    repetitions: int = 10
    warmup: int = 1
    threads: int = None
    kernel: str = 'portable'
    projection: str = 'bh'
    m: int = 4
    b: int = 64
    dtype: str = None
    seed: int = 0
    label: str = ''

    def __post_init__(self):
        if self.repetitions < 3:
            raise ConfigError('at least 3 repetitions are needed')
        if self.warmup < 1:
            raise ConfigError('at least 1 warmup iteration is needed')
        if self.rows < 1:
            raise ConfigError('rows must be positive')
        if self.kernel not in KERNELS:
            raise ConfigError('unknown gather kernel {!r}'.format(self.kernel))
        if not isinstance(self.layer, LookupConfig):
            sizes = tuple(int(v) for v in self.layer)
            if len(sizes) != 3 or min(sizes) < 1:
                raise ConfigError('dense layers are given as (d_in, t, d_out)')
            object.__setattr__(self, 'layer', sizes)
        if self.threads is None:
            object.__setattr__(self, 'threads', get_setting('THREADS'))
        if self.dtype is None:
            object.__setattr__(self, 'dtype', get_setting('BENCH_DTYPE'))
        if not self.label:
            object.__setattr__(self, 'label', self.default_label())

    @property
    def is_lookup(self):
        return isinstance(self.layer, LookupConfig)

    @property
    def d_in(self):
        return self.layer.d_in if self.is_lookup else self.layer[0]

    def default_label(self):
        if self.is_lookup:
            return 'lookup h={} tau={} {}{} {}'.format(
                self.layer.h, self.layer.tau, self.projection,
                self.m if self.projection in ('bh', 'shuffle') else '', self.kernel)
        return 'dense {}x{}x{}'.format(*self.layer)

    def flop_report(self):
        if self.is_lookup:
            return flop_model.lookup_flops(
                self.layer, kind=self.projection, m=self.m, b=self.b, label=self.label)
        return flop_model.vanilla_flops(*self.layer, label=self.label)


@dataclass
class BenchResult:
    label: str
    kernel: str
    threads: int
    rows: int
    mean_ms: float
    median_ms: float
    std_ms: float
    mflop_per_token: float
    gflops: float
    speedup: float = None
    baseline: str = ''
    hash_ms: float = None
    gather_ms: float = None

    def __post_init__(self):
        if self.std_ms < 0:
            raise ConfigError('standard deviation cannot be negative')

    def as_row(self):
        return {
            'label': self.label,
            'kernel': self.kernel,
            'threads': self.threads,
            'rows': self.rows,
            'mean_ms': self.mean_ms,
            'median_ms': self.median_ms,
            'std_ms': self.std_ms,
            'hash_ms': self.hash_ms,
            'gather_ms': self.gather_ms,
            'mflop_per_token': self.mflop_per_token,
            'gflops': self.gflops,
            'speedup': self.speedup,
            'baseline': self.baseline,
        }


def _buffer_addresses(arrays):
    return {name: array.__array_interface__['data'][0] for name, array in arrays.items()}


def _prepare(spec):
    dtype = np.dtype(spec.dtype)
    x = np.random.default_rng(spec.seed).standard_normal((spec.rows, spec.d_in)).astype(dtype)
    if spec.is_lookup:
        model = LookupFFN.build(spec.layer, kind=spec.projection, seed=spec.seed,
                                dtype=dtype, m=spec.m, b=spec.b)
        out = np.empty((spec.rows, spec.layer.d_out), dtype=dtype)

        def forward():
            started = time.perf_counter_ns()
            state = lookup_hash(x, model.projection, model.cfg, threads=spec.threads)
            hashed = time.perf_counter_ns()
            lookup_gather(state, model.tables, model.cfg, kernel=spec.kernel,
                          threads=spec.threads, out=out)
            return hashed - started, time.perf_counter_ns() - hashed

        return forward, model.parameters()

    params = init_ffn(*spec.layer, seed=spec.seed, dtype=dtype)

    def forward():
        vanilla_ffn_forward(x, params)
        return None

    return forward, params.arrays()


def bench(spec, baseline=None, check_buffers=None):
    '''
    Times spec.repetitions forward passes after spec.warmup untimed ones.

    baseline - BenchResult to report the speedup against (its median divided
        by this median)
    check_buffers - verify that no parameter buffer was reallocated during the
        timed region; defaults to settings.DEBUG
    '''
    if check_buffers is None:
        check_buffers = settings.DEBUG
    forward, parameters = _prepare(spec)
    before = _buffer_addresses(parameters) if check_buffers else None

    for _ in range(spec.warmup):
        forward()
    totals, stages = [], []
    for _ in range(spec.repetitions):
        started = time.perf_counter_ns()
        split = forward()
        totals.append(time.perf_counter_ns() - started)
        if split is not None:
            stages.append(split)

    if check_buffers and _buffer_addresses(parameters) != before:
        raise UsageError('parameter buffers were reallocated inside the timed region')

    totals_ms = np.array(totals) / 1e6
    median_ms = float(np.median(totals_ms))
    report = spec.flop_report()
    gflops = report.total_mflop * 1e6 * spec.rows / (median_ms / 1e3) / 1e9
    result = BenchResult(
        label=spec.label,
        kernel=spec.kernel if spec.is_lookup else 'gemm',
        threads=spec.threads,
        rows=spec.rows,
        mean_ms=float(totals_ms.mean()),
        median_ms=median_ms,
        std_ms=float(totals_ms.std()),
        mflop_per_token=report.total_mflop,
        gflops=gflops,
    )
    if stages:
        split_ms = np.array(stages) / 1e6
        result.hash_ms = float(np.median(split_ms[:, 0]))
        result.gather_ms = float(np.median(split_ms[:, 1]))
    if baseline is not None:
        result.speedup = baseline.median_ms / median_ms
        result.baseline = baseline.label
    logger.info('bench %s: median %.3f ms, %.2f GFLOP/s', result.label, median_ms, gflops)
    return result


def compare(specs):
    '''Benchmarks every spec; speedups are relative to the first one.'''
    if not specs:
        return []
    results = [bench(specs[0])]
    results[0].speedup = 1.0
    results[0].baseline = results[0].label
    for spec in specs[1:]:
        results.append(bench(spec, baseline=results[0]))
    return results
