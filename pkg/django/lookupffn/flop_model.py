'''
Analytic per-token FLOP accounting.

Conventions: one multiply-accumulate is 2 FLOP, a Hadamard butterfly is 1 FLOP
    per addition, a diagonal or sign multiply is 1 FLOP per entry, and the weight
    computation of a lookup costs WEIGHT_COST FLOP per hash coordinate.
'''
import logging
from collections import Counter
from dataclasses import dataclass

from lookupffn.conf import get_setting
from lookupffn.exceptions import AuditError, ConfigError
from lookupffn.fwht import next_power_of_two

logger = logging.getLogger(__name__)

MEGA = 1e6
STAGES = ('hash', 'gather', 'other')


@dataclass(frozen=True)
class FlopReport:
    hash_mflop: float = 0.0
    gather_mflop: float = 0.0
    other_mflop: float = 0.0
    label: str = ''
    note: str = ''

    def __post_init__(self):
        if min(self.hash_mflop, self.gather_mflop, self.other_mflop) < 0:
            raise ConfigError('FLOP counts must be non-negative')

    @property
    def total_mflop(self):
        return self.hash_mflop + self.gather_mflop + self.other_mflop

    def as_row(self, precision=None):
        values = {
            'hash_mflop': self.hash_mflop,
            'gather_mflop': self.gather_mflop,
            'other_mflop': self.other_mflop,
            'total_mflop': self.total_mflop,
        }
        if precision is not None:
            values = {
                key: '{:.{}f}'.format(value, precision)
                for key, value in values.items()
            }
        return {'label': self.label, **values, 'note': self.note}


class FlopCounter:
    '''
    Instrumented counter handed to kernels. Kernels call add(stage, count) with
        the number of floating-point operations they actually executed.
    '''
    def __init__(self):
        self.counts = Counter()

    def add(self, stage, count):
        self.counts[stage] += int(count)

    def reset(self):
        self.counts.clear()

    def report(self, tokens=1, label=''):
        return FlopReport(
            hash_mflop=self.counts['hash'] / tokens / MEGA,
            gather_mflop=self.counts['gather'] / tokens / MEGA,
            other_mflop=self.counts['other'] / tokens / MEGA,
            label=label,
        )


# per-token formulas, in FLOP

def bh_block_flops(D, m, b):
    return m * 2 * D * b


def bh_flops(D, m, b):
    log2d = D.bit_length() - 1
    return bh_block_flops(D, m, b) + m * D * log2d


def shuffle_flops(D, m, b):
    # the channel shuffle is a permutation and costs nothing
    return m * 2 * D * b


def acdc_flops(D, k):
    log2d = D.bit_length() - 1
    return k * (2 * D + 2 * D * log2d)


def signflip_flops(D):
    log2d = D.bit_length() - 1
    return 3 * (D + D * log2d)


def dense_flops(d_in, d_out):
    return 2 * d_in * d_out


def projection_flops(kind, d_in, d_out, m=4, b=64, k=1):
    D = next_power_of_two(max(d_in, d_out))
    if kind == 'dense':
        return dense_flops(d_in, d_out)
    if kind == 'bh':
        return bh_flops(D, m, min(b, D))
    if kind == 'shuffle':
        return shuffle_flops(D, m, min(b, D))
    if kind == 'acdc':
        return acdc_flops(D, k)
    if kind == 'signflip':
        return signflip_flops(D)
    raise ConfigError('unknown projection kind {!r}'.format(kind))


def vanilla_flops(d_in, t, d_out, label=''):
    '''
    GEMM cost of y = sigma(x W^T) V for one token; the activation is not counted.
    '''
    if min(d_in, t, d_out) < 1:
        raise ConfigError('FFN sizes must be positive')
    return FlopReport(
        other_mflop=(2 * d_in * t + 2 * t * d_out) / MEGA,
        label=label or 'vanilla {}x{}x{}'.format(d_in, t, d_out),
    )


def lookup_flops(cfg, kind='bh', m=4, b=64, k=1, weight_cost=None, label='',
                 note=''):
    '''
    Per-token cost of a LookupFFN forward pass.

    The hash projection works at width D, the smallest power of two covering
        both h*tau and d_in; the gather reads h * neighbor_count table rows of
        d_out reals.
    '''
    if weight_cost is None:
        weight_cost = get_setting('WEIGHT_COST')
    code_width = cfg.h * cfg.tau
    hash_flop = projection_flops(kind, cfg.d_in, code_width, m=m, b=b, k=k)
    gather_flop = 2 * cfg.h * cfg.neighbor_count * cfg.d_out
    other_flop = weight_cost * code_width
    return FlopReport(
        hash_mflop=hash_flop / MEGA,
        gather_mflop=gather_flop / MEGA,
        other_mflop=other_flop / MEGA,
        label=label or 'lookup h={} tau={} {}'.format(cfg.h, cfg.tau, kind),
        note=note,
    )


def published_reference_rows():
    '''
    Analytic reports for the VanillaFFN and LookupFFN cells of the published
        small (d=512) and base (d=768) configurations, paired with the value
        printed for them.
    '''
    # imported here to prevent a cyclic import error
    from lookupffn.lookup_core import LookupConfig

    def lookup(h, tau, d):
        return LookupConfig(d_in=d, d_out=d, h=h, tau=tau, variant='scaled')

    rows = [
        (vanilla_flops(512, 2048, 512, label='small vanilla'), 4.19),
        (vanilla_flops(768, 3072, 768, label='base vanilla'), 9.44),
        (lookup_flops(lookup(256, 8, 512), label='small lookup h=256 tau=8'), 1.38),
        (lookup_flops(lookup(128, 8, 512), label='small lookup h=128 tau=8'), 0.69),
        (lookup_flops(lookup(64, 8, 512), label='small lookup h=64 tau=8'), 0.35),
        (lookup_flops(lookup(32, 8, 512), label='small lookup h=32 tau=8'), 0.31),
        (lookup_flops(lookup(256, 4, 512), label='small lookup h=256 tau=4'), 0.82),
        (lookup_flops(
            lookup(170, 9, 768), label='base lookup h=170 tau=9',
            note='block size 64 inferred'), 1.39),
        (lookup_flops(
            lookup(128, 8, 512), kind='dense', label='dense hash h=128 tau=8'),
         None),
    ]
    for block in (64, 32, 16):
        rows.append((
            lookup_flops(lookup(128, 8, 512), b=block,
                         label='bh4 b={} h=128 tau=8'.format(block)),
            None,
        ))
    for h, tau in ((64, 4), (32, 8), (20, 13)):
        rows.append((
            lookup_flops(lookup(h, tau, 512),
                         label='small lookup h={} tau={}'.format(h, tau)),
            None,
        ))
    return rows


def runtime_flop_audit(layer, x, expected, tolerance=0.05, stages=STAGES):
    '''
    Runs layer.forward(x, counter=...) under an instrumented counter and
        compares each stage with the analytic FlopReport `expected`.

    Returns the measured FlopReport; raises AuditError naming the first stage
        outside the tolerance.
    '''
    counter = FlopCounter()
    layer.forward(x, counter=counter)
    measured = counter.report(tokens=x.shape[0], label='measured')
    for stage in stages:
        got = getattr(measured, '{}_mflop'.format(stage)) * MEGA
        want = getattr(expected, '{}_mflop'.format(stage)) * MEGA
        if want == 0 and got == 0:
            continue
        if abs(got - want) > tolerance * max(want, 1.0):
            logger.error('FLOP audit failed in stage %s: %s vs %s', stage, got, want)
            raise AuditError(stage, got, want, tolerance)
    logger.info('FLOP audit passed: %s', measured.as_row())
    return measured
