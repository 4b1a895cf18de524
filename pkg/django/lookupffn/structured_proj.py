'''
Structured efficient linear layers.

All projections act on row vectors: y = x R. Inputs are zero-padded from d_in
    to the internal width D (a power of two) and outputs are truncated to d_out.

    bh        R = B_1 H B_2 H ... B_m H, B_i block diagonal with block size b
    shuffle   R = B_1 F ... B_m F, F the channel shuffle of grouped convolutions
    acdc      R = prod_i A_i H D_i H, A_i and D_i diagonal (Hadamard variant)
    signflip  R = D_1 H D_2 H D_3 H with fixed random signs, no parameters
    dense     R an explicit d_in x d_out matrix
'''
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from lookupffn import flop_model
from lookupffn.exceptions import (
    ConfigError, NumericError, SizeError, TrainingError, ensure_finite,)
from lookupffn.fwht import fwht_inplace, fwht_rows, next_power_of_two

logger = logging.getLogger(__name__)

KINDS = ('dense', 'bh', 'acdc', 'signflip', 'shuffle')


@dataclass(frozen=True)
class ProjectionSpec:
    d_in: int
    d_out: int
    kind: str = 'bh'
    D: int = field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError('unknown projection kind {!r}'.format(self.kind))
        if self.d_in < 1 or self.d_out < 1:
            raise SizeError('projection widths must be positive')
        object.__setattr__(self, 'D', next_power_of_two(max(self.d_in, self.d_out)))


class _Params:
    '''
    Shared behaviour of the parameter containers: arrays() lists the learnable
        arrays in checkpoint order, like() builds a container of the same shape
        around other arrays (used for gradients).
    '''
    array_fields = ()

    def arrays(self):
        return {name: getattr(self, name) for name in self.array_fields}

    def like(self, **arrays):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(arrays)
        return type(self)(**values)

    def zeros_like(self):
        return self.like(**{
            name: np.zeros_like(value) for name, value in self.arrays().items()
        })

    @property
    def parameter_count(self):
        return sum(value.size for value in self.arrays().values())


@dataclass
class BHParams(_Params):
    D: int
    m: int
    b: int
    stages: np.ndarray
    array_fields = ('stages',)

    def __post_init__(self):
        if self.b < 1 or self.b > self.D or self.D % self.b:
            raise ConfigError('block size {} must divide D={}'.format(self.b, self.D))
        expected = (self.m, self.D // self.b, self.b, self.b)
        if self.stages.shape != expected:
            raise SizeError('stages have shape {}, expected {}'.format(
                self.stages.shape, expected))


@dataclass
class ShuffleParams(BHParams):
    pass


@dataclass
class ACDCParams(_Params):
    D: int
    k: int
    diag_a: np.ndarray
    diag_d: np.ndarray
    array_fields = ('diag_a', 'diag_d')

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError('ACDC depth must be at least 1')
        for diag in (self.diag_a, self.diag_d):
            if diag.shape != (self.k, self.D):
                raise SizeError('diagonals must have shape {}'.format((self.k, self.D)))


@dataclass
class SignFlipParams(_Params):
    D: int
    signs: np.ndarray
    # signs are fixed, so nothing is learnable
    array_fields = ()

    def __post_init__(self):
        if self.signs.shape != (3, self.D):
            raise SizeError('sign vectors must have shape {}'.format((3, self.D)))
        if not np.all(np.abs(self.signs) == 1):
            raise ConfigError('sign vectors must be exactly +1 or -1')


@dataclass
class DenseParams(_Params):
    R: np.ndarray
    array_fields = ('R',)


@dataclass
class StageCache:
    inputs: list


def _check(x, spec, params):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise SizeError('input has shape {}, expected (n, {})'.format(x.shape, spec.d_in))
    if getattr(params, 'D', spec.D) != spec.D:
        raise SizeError('parameters of width {} for a spec of width {}'.format(
            params.D, spec.D))
    ensure_finite(x, 'projection input')
    return x


def _pad(x, width):
    out = np.zeros((x.shape[0], width), dtype=x.dtype)
    out[:, :x.shape[1]] = x
    return out


def _pad_grad(grad_out, spec):
    if grad_out.ndim != 2 or grad_out.shape[1] != spec.d_out:
        raise SizeError('gradient has shape {}, expected (n, {})'.format(
            grad_out.shape, spec.d_out))
    return _pad(grad_out, spec.D)


def _block_apply(x, blocks):
    n = x.shape[0]
    groups, b, _ = blocks.shape
    out = np.einsum('ngi,gij->ngj', x.reshape(n, groups, b), blocks)
    return np.ascontiguousarray(out.reshape(n, groups * b))


def _block_apply_transposed(g, blocks):
    n = g.shape[0]
    groups, b, _ = blocks.shape
    out = np.einsum('ngj,gij->ngi', g.reshape(n, groups, b), blocks)
    return np.ascontiguousarray(out.reshape(n, groups * b))


def _block_grad(inputs, g, blocks):
    n = inputs.shape[0]
    groups, b, _ = blocks.shape
    return np.einsum(
        'ngi,ngj->gij', inputs.reshape(n, groups, b), g.reshape(n, groups, b))


def _shuffle(x, groups):
    # (group, within-group) -> (within-group, group)
    n, width = x.shape
    return np.ascontiguousarray(
        x.reshape(n, groups, width // groups).transpose(0, 2, 1).reshape(n, width))


def _unshuffle(g, groups):
    n, width = g.shape
    return np.ascontiguousarray(
        g.reshape(n, width // groups, groups).transpose(0, 2, 1).reshape(n, width))


def _staged_forward(x, params, spec, transform, counter):
    a = _pad(x, spec.D)
    inputs = []
    n = a.shape[0]
    for blocks in params.stages:
        inputs.append(a)
        a = _block_apply(a, blocks)
        if counter is not None:
            counter.add('hash', n * 2 * spec.D * params.b)
        a = transform(a, counter)
    return a, StageCache(inputs)


def _staged_backward(grad_out, params, spec, cache, transform_transposed):
    g = _pad_grad(grad_out, spec)
    grads = np.empty_like(params.stages)
    for i in reversed(range(params.m)):
        g = transform_transposed(g)
        grads[i] = _block_grad(cache.inputs[i], g, params.stages[i])
        g = _block_apply_transposed(g, params.stages[i])
    return g[:, :spec.d_in].copy(), params.like(stages=grads)


def bh_forward(x, params, spec, counter=None, return_cache=False, threads=1):
    '''
    Applies R = B_1 H ... B_m H to every row of x.

    For i = 1..m the row is multiplied by the block-diagonal B_i and then
        transformed by H. With threads > 1 the transforms run over row tiles.
    '''
    x = _check(x, spec, params)

    def hadamard(a, counter):
        return fwht_rows(a, threads=threads, counter=counter)

    a, cache = _staged_forward(x, params, spec, hadamard, counter)
    y = ensure_finite(a[:, :spec.d_out].copy(), 'bh projection')
    return (y, cache) if return_cache else y


def bh_backward(grad_out, x, params, spec, cache=None):
    '''
    Vector-Jacobian product of bh_forward. H is symmetric, so the transposed
        stage is H followed by the per-block transpose of B_i.

    Returns (grad_x, grad_params) with grad_params a BHParams of gradients.
    '''
    if cache is None:
        _, cache = bh_forward(x, params, spec, return_cache=True)
    return _staged_backward(
        np.asarray(grad_out), params, spec, cache, fwht_inplace)


def shuffle_forward(x, params, spec, counter=None, return_cache=False):
    x = _check(x, spec, params)
    groups = spec.D // params.b

    def shuffle(a, counter):
        return _shuffle(a, groups)

    a, cache = _staged_forward(x, params, spec, shuffle, counter)
    y = ensure_finite(a[:, :spec.d_out].copy(), 'shuffle projection')
    return (y, cache) if return_cache else y


def shuffle_backward(grad_out, x, params, spec, cache=None):
    if cache is None:
        _, cache = shuffle_forward(x, params, spec, return_cache=True)
    groups = spec.D // params.b
    return _staged_backward(
        np.asarray(grad_out), params, spec, cache,
        lambda g: _unshuffle(g, groups))


def acdc_forward(x, params, spec, counter=None, return_cache=False):
    '''
    Hadamard variant of ACDC: per depth, scale by A_i, transform, scale by D_i,
        transform. The cache keeps the input of both diagonal multiplies.
    '''
    x = _check(x, spec, params)
    a = _pad(x, spec.D)
    inputs = []
    for diag_a, diag_d in zip(params.diag_a, params.diag_d):
        before_a = a
        a = fwht_inplace(a * diag_a, counter=counter)
        before_d = a
        a = fwht_inplace(a * diag_d, counter=counter)
        inputs.append((before_a, before_d))
    if counter is not None:
        counter.add('hash', x.shape[0] * 2 * spec.D * params.k)
    y = ensure_finite(a[:, :spec.d_out].copy(), 'acdc projection')
    return (y, StageCache(inputs)) if return_cache else y


def acdc_backward(grad_out, x, params, spec, cache=None):
    if cache is None:
        _, cache = acdc_forward(x, params, spec, return_cache=True)
    g = _pad_grad(np.asarray(grad_out), spec)
    grad_a = np.empty_like(params.diag_a)
    grad_d = np.empty_like(params.diag_d)
    for i in reversed(range(params.k)):
        before_a, before_d = cache.inputs[i]
        fwht_inplace(g)
        grad_d[i] = np.einsum('nj,nj->j', before_d, g)
        g = g * params.diag_d[i]
        fwht_inplace(g)
        grad_a[i] = np.einsum('nj,nj->j', before_a, g)
        g = g * params.diag_a[i]
    return g[:, :spec.d_in].copy(), params.like(diag_a=grad_a, diag_d=grad_d)


def signflip_forward(x, params, spec, counter=None, return_cache=False):
    x = _check(x, spec, params)
    a = _pad(x, spec.D)
    for signs in params.signs:
        a = fwht_inplace(a * signs, counter=counter)
    if counter is not None:
        counter.add('hash', x.shape[0] * 3 * spec.D)
    y = ensure_finite(a[:, :spec.d_out].copy(), 'signflip projection')
    return (y, StageCache([])) if return_cache else y


def signflip_backward(grad_out, x, params, spec, cache=None):
    g = _pad_grad(np.asarray(grad_out), spec)
    for signs in params.signs[::-1]:
        g = fwht_inplace(g) * signs
    return g[:, :spec.d_in].copy(), params.like()


def dense_forward(x, params, spec, counter=None, return_cache=False):
    x = _check(x, spec, params)
    if params.R.shape != (spec.d_in, spec.d_out):
        raise SizeError('dense matrix has shape {}, expected {}'.format(
            params.R.shape, (spec.d_in, spec.d_out)))
    y = ensure_finite(x @ params.R, 'dense projection')
    if counter is not None:
        counter.add('hash', x.shape[0] * 2 * spec.d_in * spec.d_out)
    return (y, StageCache([x])) if return_cache else y


def dense_backward(grad_out, x, params, spec, cache=None):
    grad_out = np.asarray(grad_out)
    if grad_out.shape[1] != spec.d_out:
        raise SizeError('gradient width {} does not match d_out={}'.format(
            grad_out.shape[1], spec.d_out))
    return grad_out @ params.R.T, params.like(R=np.asarray(x).T @ grad_out)


_FORWARD = {
    'bh': bh_forward,
    'shuffle': shuffle_forward,
    'acdc': acdc_forward,
    'signflip': signflip_forward,
    'dense': dense_forward,
}
_BACKWARD = {
    'bh': bh_backward,
    'shuffle': shuffle_backward,
    'acdc': acdc_backward,
    'signflip': signflip_backward,
    'dense': dense_backward,
}


def project(x, params, spec, counter=None, return_cache=False, threads=1):
    # only the BH transforms are tiled over threads
    extra = {'threads': threads} if spec.kind == 'bh' else {}
    return _FORWARD[spec.kind](
        x, params, spec, counter=counter, return_cache=return_cache, **extra)


def project_backward(grad_out, x, params, spec, cache=None):
    return _BACKWARD[spec.kind](grad_out, x, params, spec, cache=cache)


def _orthogonal_blocks(rng, count, b):
    gaussian = rng.standard_normal((count, b, b))
    q, r = np.linalg.qr(gaussian)
    # sign fix makes the draw uniform over the orthogonal group
    return q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]


def init_projection(spec, seed, m=4, b=64, k=4, orthogonal=False):
    '''
    Deterministic parameter initialization.

    BH blocks are Gaussian with std 1/sqrt(b*D): each stage then has unit gain
        because H multiplies norms by sqrt(D). `orthogonal=True` draws scaled
        orthogonal blocks instead. ACDC diagonals have magnitude D^-1/2 and
        random signs, dense entries have std 1/sqrt(d_in).
    '''
    rng = np.random.default_rng(seed)
    D = spec.D
    if spec.kind == 'dense':
        R = rng.standard_normal((spec.d_in, spec.d_out)) / np.sqrt(spec.d_in)
        return DenseParams(R=R)
    if spec.kind in ('bh', 'shuffle'):
        b = min(b, D)
        if D % b:
            raise ConfigError('block size {} must divide D={}'.format(b, D))
        # the shuffle has no sqrt(D) gain to compensate
        gain = np.sqrt(D) if spec.kind == 'bh' else 1.0
        if orthogonal:
            stages = _orthogonal_blocks(rng, m * (D // b), b) / gain
        else:
            stages = rng.standard_normal((m * (D // b), b, b)) / np.sqrt(b) / gain
        cls = BHParams if spec.kind == 'bh' else ShuffleParams
        return cls(D=D, m=m, b=b, stages=stages.reshape(m, D // b, b, b))
    if spec.kind == 'acdc':
        scale = 1.0 / np.sqrt(D)

        def diagonal():
            signs = rng.choice((-1.0, 1.0), size=(k, D))
            return signs * scale * (1.0 + 0.01 * rng.standard_normal((k, D)))

        return ACDCParams(D=D, k=k, diag_a=diagonal(), diag_d=diagonal())
    signs = rng.choice((-1.0, 1.0), size=(3, D))
    return SignFlipParams(D=D, signs=signs)


def projection_flops(spec, params):
    '''Analytic per-row FLOP count of project(x, params, spec).'''
    return flop_model.projection_flops(
        spec.kind, spec.d_in, spec.d_out,
        m=getattr(params, 'm', 1), b=getattr(params, 'b', 1),
        k=getattr(params, 'k', 1),
    )


def materialize(params, spec):
    # pushes the D basis vectors through the projection
    return project(np.eye(spec.d_in), params, spec)


@dataclass
class ApproxResult:
    kind: str
    hyper: dict
    error: float
    flops: int
    param_count: int
    step_size: float
    steps: int

    def as_row(self):
        row = {'kind': self.kind}
        row.update(self.hyper)
        row.update({
            'flops': self.flops,
            'params': self.param_count,
            'error': self.error,
            'step_size': self.step_size,
            'steps': self.steps,
        })
        return row


def default_step_size(kind, D):
    # curvature is ~1 for dense and shuffle; every Hadamard-based kind sees ~D
    return {'dense': 0.5, 'shuffle': 0.05}.get(kind, 0.05 / D)


def matrix_approx_experiment(target, kind, hyper=None, steps=10000, seed=0,
                             step_size=None):
    '''
    Fits a projection of the given kind to `target` (D x D) by plain gradient
        descent on 1/2 ||R_theta - target||_F^2, where R_theta is measured by
        pushing the D basis vectors through the projection.

    Returns an ApproxResult whose error is the mean squared entry error.
    '''
    target = np.asarray(target, dtype=np.float64)
    D = target.shape[0]
    if target.shape != (D, D):
        raise SizeError('target must be square, got {}'.format(target.shape))
    hyper = dict(hyper or {})
    spec = ProjectionSpec(D, D, kind)
    params = init_projection(spec, seed, **hyper)
    if step_size is None:
        step_size = default_step_size(kind, D)
    basis = np.eye(D)
    initial = None

    for step in range(steps if params.arrays() else 0):
        try:
            R, cache = project(basis, params, spec, return_cache=True)
        except NumericError:
            raise TrainingError(step, step_size, stage='matrix approximation')
        residual = R - target
        loss = 0.5 * float(np.sum(residual ** 2))
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or loss > 1e6 * max(initial, 1e-300):
            raise TrainingError(step, step_size, stage='matrix approximation')
        _, grads = project_backward(residual, basis, params, spec, cache=cache)
        for name, grad in grads.arrays().items():
            getattr(params, name)[...] -= step_size * grad

    try:
        R = project(basis, params, spec)
    except NumericError:
        raise TrainingError(steps, step_size, stage='matrix approximation')
    error = float(np.mean((R - target) ** 2))
    if not np.isfinite(error):
        raise TrainingError(steps, step_size, stage='matrix approximation')
    return ApproxResult(
        kind=kind, hyper=hyper, error=error,
        flops=projection_flops(spec, params),
        param_count=params.parameter_count,
        step_size=step_size, steps=steps,
    )


def random_target(D, seed):
    # entries N(0, 1/D) so the target has unit gain like the initial projections
    return np.random.default_rng(seed).standard_normal((D, D)) / np.sqrt(D)


def matched_acdc_depth(D, m, b):
    '''ACDC depth whose FLOP count is closest to BH{m} with block size b.'''
    ratio = flop_model.bh_flops(D, m, b) / flop_model.acdc_flops(D, 1)
    return max(1, int(round(ratio)))


def sweep_grid(D, max_depth=16):
    blocks = [1 << i for i in range(1, D.bit_length())]
    grid = [('dense', {})]
    grid += [('bh', {'m': 4, 'b': b}) for b in blocks]
    grid += [('bh', {'m': 1, 'b': b}) for b in blocks]
    grid += [('shuffle', {'m': 1, 'b': b}) for b in blocks]
    grid += [('acdc', {'k': k}) for k in range(1, max_depth + 1)]
    grid += [('signflip', {})]
    return grid


def projection_sweep(D=64, seeds=(0, 1, 2, 3, 4), steps=10000, grid=None,
                     retries=3):
    '''
    Runs matrix_approx_experiment over every (kind, hyper) point of the grid for
        every seed. A diverging run is retried with half the step size up to
        `retries` times; a point that still diverges is reported with a NaN
        error.
    '''
    rows = []
    for seed in seeds:
        target = random_target(D, seed)
        for kind, hyper in grid or sweep_grid(D):
            step_size = default_step_size(kind, D)
            for _ in range(retries + 1):
                try:
                    result = matrix_approx_experiment(
                        target, kind, hyper, steps=steps, seed=seed,
                        step_size=step_size)
                    break
                except TrainingError as exc:
                    logger.warning(
                        'kind=%s %s seed=%s diverged at step %s with step size %g',
                        kind, hyper, seed, exc.step, step_size)
                    step_size /= 2
            else:
                spec = ProjectionSpec(D, D, kind)
                params = init_projection(spec, seed, **hyper)
                result = ApproxResult(
                    kind=kind, hyper=dict(hyper), error=float('nan'),
                    flops=projection_flops(spec, params),
                    param_count=params.parameter_count,
                    step_size=step_size, steps=steps,
                )
            row = result.as_row()
            row['seed'] = seed
            rows.append(row)
            logger.debug('sweep point %s', row)
    return rows


@dataclass
class Projection:
    '''A projection spec together with its parameters.'''
    spec: ProjectionSpec
    params: _Params

    @classmethod
    def build(cls, d_in, d_out, kind='bh', seed=0, **hyper):
        spec = ProjectionSpec(d_in, d_out, kind)
        return cls(spec=spec, params=init_projection(spec, seed, **hyper))

    def forward(self, x, counter=None, return_cache=False, threads=1):
        return project(x, self.params, self.spec, counter=counter,
                       return_cache=return_cache, threads=threads)

    def backward(self, grad_out, x, cache=None):
        return project_backward(grad_out, x, self.params, self.spec, cache=cache)

    @property
    def flops(self):
        return projection_flops(self.spec, self.params)
