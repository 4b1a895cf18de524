'''
Experiment runners shared by the `lffn` management command and the
    run_experiment Celery task.

Each runner takes a dict of parameters (missing keys fall back to defaults)
    and returns a list of flat row dicts.
'''
import logging
import os
import tempfile

import numpy as np

from lookupffn import baselines, bench, checkpoint, flop_model, structured_proj
from lookupffn import train_harness
from lookupffn.exceptions import ConfigError
from lookupffn.lookup_core import LookupConfig, LookupFFN

logger = logging.getLogger(__name__)


def parse_sizes(value, count=None):
    '''Accepts "512,2048,512" or a list of ints.'''
    if isinstance(value, str):
        try:
            value = [int(part) for part in value.split(',') if part.strip()]
        except ValueError:
            raise ConfigError('expected comma separated integers, got {!r}'.format(value))
    try:
        value = [int(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError('expected a list of integers, got {!r}'.format(value))
    if count is not None and len(value) != count:
        raise ConfigError('expected {} comma separated integers'.format(count))
    return value


def _get(params, name, default):
    value = params.get(name)
    if value is None:
        return default
    # numeric defaults fix the type of the value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        try:
            return type(default)(value)
        except (TypeError, ValueError):
            raise ConfigError('{} must be a number, got {!r}'.format(name, value))
    return value


def _lookup_config(params, d=64, h=64, tau=6, variant='scaled'):
    d = _get(params, 'd', d)
    return LookupConfig(
        d_in=d, d_out=d, h=_get(params, 'h', h), tau=_get(params, 'tau', tau),
        variant=_get(params, 'variant', variant),
        neighbor_count=_get(params, 'neighbors', 1),
    )


def run_flops(params):
    precision = _get(params, 'precision', 2)
    reports = []
    if params.get('vanilla'):
        reports.append(flop_model.vanilla_flops(*parse_sizes(params['vanilla'], 3)))
    if params.get('lookup'):
        h, tau = parse_sizes(params['lookup'], 2)
        cfg = _lookup_config(params, d=512, h=h, tau=tau)
        report = flop_model.lookup_flops(
            cfg, kind=_get(params, 'projection', 'bh'), m=_get(params, 'm', 4),
            b=_get(params, 'b', 64))
        if params.get('audit'):
            model = LookupFFN.build(
                cfg, kind=_get(params, 'projection', 'bh'), m=_get(params, 'm', 4),
                b=_get(params, 'b', 64))
            x = np.random.default_rng(_get(params, 'seed', 0)).standard_normal((4, cfg.d_in))
            flop_model.runtime_flop_audit(model, x, report)
        reports.append(report)
    rows = [report.as_row(precision) for report in reports]
    if params.get('reference'):
        for report, published in flop_model.published_reference_rows():
            row = report.as_row(precision)
            row['published'] = published
            rows.append(row)
    if not rows:
        raise ConfigError('flops needs --vanilla, --lookup or --reference')
    return rows


def run_grad_check(params):
    model_kind = _get(params, 'model', 'lookup')
    full = bool(params.get('full_neighbors'))
    top1 = model_kind == 'lookup' and not full and _get(params, 'neighbors', 1) == 1
    threshold = _get(params, 'threshold', 1e-5 if top1 else 1e-6)
    model = train_harness.build_model(
        model_kind,
        d_in=_get(params, 'd', 16), d_out=_get(params, 'd', 16),
        seed=_get(params, 'seed', 0), h=_get(params, 'h', 8),
        tau=_get(params, 'tau', 3), t=_get(params, 't', 16),
        variant=_get(params, 'variant', 'softmax'),
        neighbor_count=_get(params, 'neighbors', 1),
        projection=_get(params, 'projection', 'bh'),
        m=_get(params, 'm', 4), b=_get(params, 'b', 8),
        activation=_get(params, 'activation', 'gelu'),
        full_neighbors=full,
    )
    d = _get(params, 'd', 16)
    x = np.random.default_rng(_get(params, 'seed', 0) + 100).standard_normal(
        (_get(params, 'rows', 4), d))
    report = train_harness.grad_check(model, x, seed=_get(params, 'seed', 0),
                                      threshold=threshold)
    return report.as_rows()


def run_train_toy(params):
    cfg = train_harness.TrainConfig(
        task=_get(params, 'task', 'teacher-distill'),
        steps=_get(params, 'steps', 1000),
        batch=_get(params, 'batch', 64),
        lr=_get(params, 'lr', 1e-3),
        optimizer=_get(params, 'optimizer', 'adam'),
        seed=_get(params, 'seed', 0),
        log_every=_get(params, 'log_every', 100),
    )
    d = _get(params, 'd', 64)
    student = train_harness.build_student(
        _get(params, 'student', 'lookup-h64-tau6-bh4'), d_in=d, d_out=d, seed=cfg.seed)
    task = train_harness.make_task(cfg, d_in=d, d_out=d, t=_get(params, 't', 256))
    result = train_harness.train(student, task, cfg)
    logger.info('train-toy: error %.4g -> %.4g', result.initial_error, result.final_error)
    return result.curve_rows()


def run_sweep(params):
    target = _get(params, 'target', 'tau')
    seeds = parse_sizes(params['seeds']) if params.get('seeds') else None
    if target == 'tau':
        grid = parse_sizes(_get(params, 'grid', '64,4,32,8,21,12'))
        if len(grid) % 2:
            raise ConfigError('the tau grid is a list of h,tau pairs')
        return train_harness.tau_tradeoff_sweep(
            grid=list(zip(grid[::2], grid[1::2])), d=_get(params, 'd', 64),
            steps=_get(params, 'steps', 2000), seeds=seeds or (0,),
            b=_get(params, 'b', 16))
    if target == 'projection':
        return structured_proj.projection_sweep(
            D=_get(params, 'width', 64), seeds=seeds or (0, 1, 2, 3, 4),
            steps=_get(params, 'steps', 10000))
    if target == 'yoso':
        return baselines.yoso_variance_experiment(
            tau=_get(params, 'tau', 4), seeds=seeds or range(10))
    raise ConfigError('unknown sweep target {!r}'.format(target))


def run_bench(params):
    d = _get(params, 'd', 512)
    vanilla = parse_sizes(_get(params, 'vanilla', [d, 4 * d, d]), 3)
    h, tau = parse_sizes(_get(params, 'lookup', '128,8'), 2)
    common = dict(
        rows=_get(params, 'rows', 4096),
        repetitions=_get(params, 'repetitions', 10),
        warmup=_get(params, 'warmup', 1),
        threads=params.get('threads'),
        dtype=params.get('dtype'),
        seed=_get(params, 'seed', 0),
    )
    kernel = _get(params, 'kernel', 'portable')
    kernels = bench.KERNELS if kernel == 'both' else (kernel,)
    cfg = LookupConfig(d_in=vanilla[0], d_out=vanilla[2], h=h, tau=tau, variant='scaled')
    specs = [bench.BenchSpec(layer=vanilla, **common)]
    specs += [
        bench.BenchSpec(layer=cfg, kernel=name, projection=_get(params, 'projection', 'bh'),
                        m=_get(params, 'm', 4), b=_get(params, 'b', 64), **common)
        for name in kernels
    ]
    return [result.as_row() for result in bench.compare(specs)]


def run_lsh_diag(params):
    seed = _get(params, 'seed', 0)
    t, d, tau = _get(params, 't', 2048), _get(params, 'd', 512), _get(params, 'tau', 8)
    rng = np.random.default_rng(seed)
    if params.get('correlated'):
        W = baselines.correlated_weights(t, d, seed=seed)
    else:
        W = rng.standard_normal((t, d))
    queries = rng.standard_normal((_get(params, 'queries', 256), d))
    budgets = parse_sizes(_get(params, 'budgets', '1,2,4,8,16,32'))
    rows = [
        dict(section='recall', **row)
        for row in baselines.lsh_recall_experiment(W, queries, budgets, tau=tau, seed=seed)
    ]
    ensemble = baselines.build_lsh_ensemble(W, 1, tau, seed=seed)
    rows.append(dict(section='buckets', **baselines.bucket_histogram(ensemble).as_row()))

    cfg = LookupConfig(d_in=d, d_out=d, h=_get(params, 'h', 16), tau=tau)
    model = LookupFFN.build(cfg, seed=seed, b=_get(params, 'b', 16))
    _, cache = model.forward(queries)
    rows.append({
        'section': 'reads',
        'mean_reads': float(cache.reads_per_row.mean()),
        'var_reads': float(cache.reads_per_row.var()),
    })
    return rows


def run_approx_matrix(params):
    D = _get(params, 'width', 64)
    b = _get(params, 'b', 8)
    kind = params.get('kind')
    if kind:
        hyper = {
            'bh': {'m': _get(params, 'm', 4), 'b': b},
            'shuffle': {'m': _get(params, 'm', 1), 'b': b},
            'acdc': {'k': _get(params, 'k', 4)},
        }.get(kind, {})
        grid = [(kind, hyper)]
    else:
        grid = [
            ('dense', {}),
            ('bh', {'m': 4, 'b': b}),
            ('bh', {'m': 1, 'b': b}),
            ('shuffle', {'m': 1, 'b': b}),
            ('acdc', {'k': structured_proj.matched_acdc_depth(D, 4, b)}),
            ('signflip', {}),
        ]
    return structured_proj.projection_sweep(
        D=D, seeds=(_get(params, 'seed', 0),), steps=_get(params, 'steps', 2000),
        grid=grid)


def run_checkpoint_io(params):
    cfg = _lookup_config(params, d=32, h=8, tau=4, variant='softmax')
    kind = _get(params, 'projection', 'bh')
    model = LookupFFN.build(cfg, kind=kind, seed=_get(params, 'seed', 0),
                            m=_get(params, 'm', 4), b=_get(params, 'b', 16))
    path = params.get('path')
    cleanup = path is None
    if cleanup:
        handle, path = tempfile.mkstemp(suffix='.lffn')
        os.close(handle)
    try:
        size = checkpoint.save_checkpoint(model, path)
        loaded = checkpoint.load_checkpoint(path, neighbor_count=cfg.neighbor_count)
    finally:
        if cleanup:
            os.remove(path)
    x = np.random.default_rng(1).standard_normal((8, cfg.d_in))
    diff = max(
        float(np.max(np.abs(a - b))) if a.size else 0.0
        for a, b in zip(model.parameters().values(), loaded.parameters().values())
    )
    out_diff = float(np.max(np.abs(model.forward(x)[0] - loaded.forward(x)[0])))
    return [{
        'path': '' if cleanup else path,
        'bytes': size,
        'projection': kind,
        'max_param_diff': diff,
        'max_output_diff': out_diff,
    }]


RUNNERS = {
    'flops': run_flops,
    'grad-check': run_grad_check,
    'train-toy': run_train_toy,
    'sweep': run_sweep,
    'bench': run_bench,
    'lsh-diag': run_lsh_diag,
    'approx-matrix': run_approx_matrix,
    'checkpoint-io': run_checkpoint_io,
}


def run(kind, params):
    try:
        runner = RUNNERS[kind]
    except KeyError:
        raise ConfigError('unknown experiment {!r}'.format(kind))
    logger.info('running %s with %s', kind, params)
    return runner(dict(params or {}))
