'''
Gradient checks and desk-scale training.

Models follow one protocol (LookupFFN, baselines.DenseFFN, ProjectionModel):
    forward(x, counter=None) -> (y, cache)
    backward(grad_y, cache) -> (grad_x, {name: gradient})
    parameters() -> {name: array}
    writable(name) -> context manager yielding the writable array
'''
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from lookupffn import flop_model
from lookupffn.baselines import DenseFFN, init_ffn, vanilla_ffn_forward
from lookupffn.conf import get_setting
from lookupffn.exceptions import AuditError, ConfigError, TrainingError
from lookupffn.lookup_core import LookupConfig, LookupFFN
from lookupffn.structured_proj import Projection

logger = logging.getLogger(__name__)

TASKS = ('teacher-distill', 'synthetic-regression', 'toy-classification')
OPTIMIZERS = ('sgd', 'adam')


@dataclass(frozen=True)
class TrainConfig:
    task: str = 'teacher-distill'
    steps: int = 1000
    batch: int = 64
    lr: float = 1e-3
    optimizer: str = 'adam'
    seed: int = 0
    clip_norm: float = None
    log_every: int = 100
    eval_rows: int = 1024

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError('unknown task {!r}'.format(self.task))
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError('unknown optimizer {!r}'.format(self.optimizer))
        if self.steps < 1:
            raise ConfigError('steps must be at least 1')
        if self.lr <= 0:
            raise ConfigError('learning rate must be positive')
        if self.batch < 1:
            raise ConfigError('batch must be at least 1')
        if self.clip_norm is None:
            object.__setattr__(self, 'clip_norm', get_setting('CLIP_NORM'))


class ProjectionModel:
    '''Exposes a bare projection through the model protocol.'''

    def __init__(self, projection):
        self.projection = projection

    def forward(self, x, counter=None, **kwargs):
        y, cache = self.projection.forward(x, counter=counter, return_cache=True)
        return y, (x, cache)

    def backward(self, grad_y, cache, **kwargs):
        x, proj_cache = cache
        grad_x, grads = self.projection.backward(grad_y, x, cache=proj_cache)
        return grad_x, grads.arrays()

    def parameters(self):
        return self.projection.params.arrays()

    def writable(self, name):
        return nullcontext(self.parameters()[name])


# optimizers

class SGD:
    def __init__(self, lr):
        self.lr = lr
        self.applied = 0

    def apply(self, model, grads):
        for name, grad in grads.items():
            with model.writable(name) as param:
                param -= self.lr * grad
        self.applied += 1


class Adam:
    def __init__(self, lr, betas=None, eps=None):
        self.lr = lr
        self.beta1, self.beta2 = betas or get_setting('ADAM_BETAS')
        self.eps = eps if eps is not None else get_setting('ADAM_EPS')
        self.moments = {}
        self.applied = 0

    def apply(self, model, grads):
        self.applied += 1
        t = self.applied
        for name, grad in grads.items():
            m, v = self.moments.get(name, (np.zeros_like(grad), np.zeros_like(grad)))
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad * grad
            self.moments[name] = (m, v)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            with model.writable(name) as param:
                param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg):
    return Adam(cfg.lr) if cfg.optimizer == 'adam' else SGD(cfg.lr)


def clip_gradients(grads, max_norm):
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


# gradient check

@dataclass
class GradCheckReport:
    errors: dict
    excluded: dict
    threshold: float
    boundary_excluded: bool = False

    def __post_init__(self):
        if any(error < 0 for error in self.errors.values()):
            raise ConfigError('relative errors are non-negative')

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def failing(self):
        return [name for name, error in self.errors.items() if error > self.threshold]

    @property
    def passed(self):
        return not self.failing

    def as_rows(self):
        return [
            {
                'parameter': name,
                'max_rel_error': error,
                'excluded': self.excluded.get(name, 0),
                'passed': error <= self.threshold,
            }
            for name, error in self.errors.items()
        ]


def _selection(cache):
    # the neighbourhood is a set; its order follows the signs of z
    state = getattr(cache, 'state', None)
    return None if state is None else np.sort(state.selected, axis=-1)


def _relative_error(analytic, numeric, keep):
    if not keep.any():
        return 0.0
    a, n = analytic[keep], numeric[keep]
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)


def grad_check(model, x, seed=0, threshold=1e-6, step=None):
    '''
    Compares every analytic gradient (parameters and input) with central
        finite differences of the scalar sum(r * y) for a fixed random r.

    With a top-1 lookup the function is only piecewise smooth: an entry is
        excluded when either perturbed evaluation selects different codes than
        the unperturbed one.
    '''
    step = step or get_setting('GRAD_CHECK_STEP')
    x = np.array(x, dtype=np.float64)
    y, cache = model.forward(x)
    r = np.random.default_rng(seed).standard_normal(y.shape)
    grad_x, grads = model.backward(r, cache)
    base = _selection(cache)

    def evaluate():
        out, out_cache = model.forward(x)
        selected = _selection(out_cache)
        moved = base is not None and not np.array_equal(selected, base)
        return float(np.sum(r * out)), moved

    def numeric_gradient(name, array_context):
        with array_context() as array:
            shape = array.shape
        numeric = np.zeros(shape)
        keep = np.ones(shape, dtype=bool)
        for index in np.ndindex(shape):
            with array_context() as array:
                original = array[index]
                array[index] = original + step
            plus, moved_plus = evaluate()
            with array_context() as array:
                array[index] = original - step
            minus, moved_minus = evaluate()
            with array_context() as array:
                array[index] = original
            numeric[index] = (plus - minus) / (2 * step)
            keep[index] = not (moved_plus or moved_minus)
        return numeric, keep

    errors, excluded = {}, {}
    for name, analytic in grads.items():
        numeric, keep = numeric_gradient(name, lambda: model.writable(name))
        errors[name] = _relative_error(analytic, numeric, keep)
        excluded[name] = int((~keep).sum())

    def input_context():
        return nullcontext(x)

    numeric, keep = numeric_gradient('input', input_context)
    errors['input'] = _relative_error(grad_x, numeric, keep)
    excluded['input'] = int((~keep).sum())

    report = GradCheckReport(
        errors=errors, excluded=excluded, threshold=threshold,
        boundary_excluded=base is not None and sum(excluded.values()) > 0,
    )
    if report.boundary_excluded:
        logger.info('grad check excluded %s entries at sign boundaries', excluded)
    if not report.passed:
        logger.warning('grad check failed for %s', report.failing)
    return report


def build_model(kind, d_in=16, d_out=16, seed=0, h=8, tau=4, t=16, variant='softmax',
                neighbor_count=1, projection='bh', m=4, b=8, activation='gelu',
                full_neighbors=False, dtype=np.float64):
    '''Builds a model for grad_check, training or benchmarking.'''
    if kind == 'vanilla':
        return DenseFFN.build(d_in, t, d_out, activation, seed, dtype=dtype)
    if kind == 'projection':
        return ProjectionModel(Projection.build(d_in, d_out, projection, seed, m=m, b=b))
    if kind == 'lookup':
        if full_neighbors:
            neighbor_count = 1 << tau
        cfg = LookupConfig(d_in=d_in, d_out=d_out, h=h, tau=tau, variant=variant,
                           neighbor_count=neighbor_count)
        return LookupFFN.build(cfg, kind=projection, seed=seed, dtype=dtype, m=m, b=b)
    raise ConfigError('unknown model kind {!r}'.format(kind))


# training tasks

class DistillTask:
    '''Match the outputs of a frozen dense FFN on Gaussian inputs (MSE).'''

    def __init__(self, teacher):
        self.teacher = teacher
        self.d_in, _, self.d_out = teacher.sizes

    def sample(self, rng, n):
        x = rng.standard_normal((n, self.d_in))
        return x, vanilla_ffn_forward(x, self.teacher)

    def loss_and_grad(self, y, target):
        diff = y - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size

    def error(self, y, target):
        return float(np.mean((y - target) ** 2))


class RegressionTask(DistillTask):
    '''Fit y = sin(x A) for a fixed random A.'''

    def __init__(self, d_in, d_out, seed):
        self.d_in, self.d_out = d_in, d_out
        self.A = np.random.default_rng(seed).standard_normal((d_in, d_out)) / np.sqrt(d_in)

    def sample(self, rng, n):
        x = rng.standard_normal((n, self.d_in))
        return x, np.sin(x @ self.A)


class ClassificationTask(DistillTask):
    '''Predict the argmax of a random dense FFN; softmax cross-entropy.'''

    def loss_and_grad(self, y, target):
        labels = np.argmax(target, axis=1)
        shifted = y - y.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        n = y.shape[0]
        loss = -float(np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
        probs[np.arange(n), labels] -= 1.0
        return loss, probs / n

    def error(self, y, target):
        # misclassification rate
        return float(np.mean(np.argmax(y, axis=1) != np.argmax(target, axis=1)))


def make_task(cfg, d_in=64, d_out=64, t=256, teacher=None):
    if cfg.task == 'synthetic-regression':
        return RegressionTask(d_in, d_out, cfg.seed + 7)
    teacher = teacher or init_ffn(d_in, t, d_out, 'gelu', seed=cfg.seed + 7)
    if cfg.task == 'toy-classification':
        return ClassificationTask(teacher)
    return DistillTask(teacher)


@dataclass
class TrainResult:
    curve: list
    initial_error: float
    final_error: float
    table_writes: int = 0
    reports: list = field(default_factory=list)

    def curve_rows(self):
        return [
            {'step': step, 'loss': loss, 'wall_ms': wall_ms}
            for step, loss, wall_ms in self.curve
        ]


def model_flops(model, kind='bh', m=4, b=64):
    if isinstance(model, LookupFFN):
        params = model.projection.params
        return flop_model.lookup_flops(
            model.cfg, kind=model.spec.kind, m=getattr(params, 'm', m),
            b=getattr(params, 'b', b), k=getattr(params, 'k', 1), label='student')
    d_in, t, d_out = model.params.sizes
    return flop_model.vanilla_flops(d_in, t, d_out, label='dense')


def train(model, task, cfg):
    '''
    Trains by backpropagation only. HashTables are never rebuilt: the only
        writes to them are optimizer steps, which is checked at the end.
    '''
    rng = np.random.default_rng(cfg.seed)
    eval_x, eval_target = task.sample(np.random.default_rng(cfg.seed + 1), cfg.eval_rows)
    optimizer = make_optimizer(cfg)
    tables = getattr(model, 'tables', None)
    writes_before = tables.writes if tables is not None else 0

    initial = task.error(model.forward(eval_x)[0], eval_target)
    curve = []
    started = time.perf_counter()
    for step in range(cfg.steps):
        x, target = task.sample(rng, cfg.batch)
        y, cache = model.forward(x)
        loss, grad_y = task.loss_and_grad(y, target)
        if not np.isfinite(loss):
            raise TrainingError(step, cfg.lr)
        curve.append((step, loss, (time.perf_counter() - started) * 1e3))
        _, grads = model.backward(grad_y, cache)
        grads, norm = clip_gradients(grads, cfg.clip_norm)
        optimizer.apply(model, grads)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info('step %d loss %.5g grad norm %.3g', step, loss, norm)

    final = task.error(model.forward(eval_x)[0], eval_target)
    if not np.isfinite(final):
        raise TrainingError(cfg.steps, cfg.lr)
    writes = tables.writes - writes_before if tables is not None else 0
    if tables is not None and writes != optimizer.applied:
        raise AuditError('tables', writes, optimizer.applied, 0.0)
    return TrainResult(curve=curve, initial_error=initial, final_error=final,
                       table_writes=writes)


def teacher_distill(teacher, student, cfg):
    '''
    Distills a frozen dense FFN into `student` and pairs the result with the
        FLOP reports of both.
    '''
    result = train(student, DistillTask(teacher), cfg)
    d_in, t, d_out = teacher.sizes
    result.reports = [
        flop_model.vanilla_flops(d_in, t, d_out, label='teacher'),
        model_flops(student),
    ]
    logger.info('distillation: mse %.4g -> %.4g', result.initial_error, result.final_error)
    return result


DEFAULT_STUDENTS = {
    'lookup-h64-tau6-bh4': dict(kind='lookup', h=64, tau=6, variant='scaled',
                                projection='bh', m=4, b=16),
    'lookup-h32-tau8-bh4': dict(kind='lookup', h=32, tau=8, variant='scaled',
                                projection='bh', m=4, b=16),
    'lookup-h64-tau6-dense': dict(kind='lookup', h=64, tau=6, variant='scaled',
                                  projection='dense'),
    'dense-t64': dict(kind='vanilla', t=64),
}


def build_student(name_or_options, d_in=64, d_out=64, seed=0):
    options = DEFAULT_STUDENTS.get(name_or_options, name_or_options)
    if not isinstance(options, dict):
        raise ConfigError('unknown student {!r}'.format(name_or_options))
    return build_model(d_in=d_in, d_out=d_out, seed=seed, **options)


def tau_tradeoff_sweep(grid=((64, 4), (32, 8), (21, 12)), d=64, t=256, steps=0,
                       seeds=(0,), b=16, lr=1e-3):
    '''
    Distillation MSE and FLOP report for every (h, tau) cell. With steps=0 only
        the FLOP columns are produced.
    '''
    rows = []
    for h, tau in grid:
        cfg = LookupConfig(d_in=d, d_out=d, h=h, tau=tau, variant='scaled')
        report = flop_model.lookup_flops(cfg, b=b)
        row = {'h': h, 'tau': tau, 'h_tau': h * tau}
        row.update(report.as_row())
        mse = []
        for seed in seeds if steps else ():
            teacher = init_ffn(d, t, d, 'gelu', seed=seed + 7)
            student = build_model('lookup', d_in=d, d_out=d, h=h, tau=tau,
                                  variant='scaled', seed=seed, b=b)
            result = teacher_distill(
                teacher, student,
                TrainConfig(steps=steps, seed=seed, lr=lr, log_every=0))
            mse.append(result.final_error)
        row['final_mse'] = float(np.mean(mse)) if mse else None
        rows.append(row)
    return rows
