import os

from django.conf import settings


DEFAULTS = {
    # dtype of the benchmark path; verification paths always run in float64
    'BENCH_DTYPE': 'float32',
    'THREADS': os.cpu_count() or 1,
    # per-coordinate cost of the weight computation in the FLOP model
    'WEIGHT_COST': 6,
    # upper bound on elements materialized by one gather tile
    'GATHER_TILE_ELEMENTS': 1 << 22,
    'GRAD_CHECK_STEP': 1e-5,
    'ADAM_BETAS': (0.9, 0.999),
    'ADAM_EPS': 1e-8,
    'CLIP_NORM': 1.0,
}


def get_setting(name):
    '''
    Returns a lookupffn setting, preferring settings.LOOKUPFFN over DEFAULTS.
    '''
    overrides = getattr(settings, 'LOOKUPFFN', {}) if settings.configured else {}
    if name in overrides:
        return overrides[name]
    return DEFAULTS[name]
