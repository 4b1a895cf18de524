'''
Baselines the lookup layer is measured against: the dense GEMM FFN
    y = sigma(x W^T) V, and hyperplane-LSH diagnostics (retrieval recall,
    bucket skew and the static-table estimator built from W and V).
'''
import logging
import math
from collections import defaultdict
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from lookupffn.exceptions import ConfigError, SizeError, ensure_finite
from lookupffn.lookup_core import compute_codes

logger = logging.getLogger(__name__)

ACTIVATIONS = ('gelu', 'sigmoid', 'softmax')

_erf = np.vectorize(math.erf, otypes=[np.float64])


@dataclass
class FFNParams:
    W: np.ndarray
    V: np.ndarray
    activation: str = 'gelu'

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError('unknown activation {!r}'.format(self.activation))
        if self.W.ndim != 2 or self.V.ndim != 2 or self.W.shape[0] != self.V.shape[0]:
            raise SizeError('W is t x d_in and V is t x d_out, got {} and {}'.format(
                self.W.shape, self.V.shape))
        if self.W.shape[0] < 1:
            raise SizeError('an FFN needs at least one hidden unit')

    @property
    def sizes(self):
        return self.W.shape[1], self.W.shape[0], self.V.shape[1]

    def arrays(self):
        return {'W': self.W, 'V': self.V}


def init_ffn(d_in, t, d_out, activation='gelu', seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((t, d_in)) / np.sqrt(d_in)
    V = rng.standard_normal((t, d_out)) / np.sqrt(t)
    return FFNParams(W=W.astype(dtype), V=V.astype(dtype), activation=activation)


def _activate(a, activation):
    if activation == 'gelu':
        return 0.5 * a * (1.0 + _erf(a / math.sqrt(2.0)))
    if activation == 'sigmoid':
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    shifted = np.exp(a - a.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _activation_backward(grad_hidden, a, hidden, activation):
    if activation == 'gelu':
        cdf = 0.5 * (1.0 + _erf(a / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
        return grad_hidden * (cdf + a * pdf)
    if activation == 'sigmoid':
        return grad_hidden * hidden * (1.0 - hidden)
    inner = np.sum(grad_hidden * hidden, axis=1, keepdims=True)
    return hidden * (grad_hidden - inner)


@dataclass
class FFNCache:
    x: np.ndarray
    a: np.ndarray
    hidden: np.ndarray


def vanilla_ffn_forward(x, p, counter=None, return_cache=False):
    x = np.asarray(x)
    d_in, t, d_out = p.sizes
    if x.ndim != 2 or x.shape[1] != d_in:
        raise SizeError('input has shape {}, expected (n, {})'.format(x.shape, d_in))
    a = x @ p.W.T
    hidden = _activate(a, p.activation)
    y = ensure_finite(hidden @ p.V, 'ffn')
    if counter is not None:
        counter.add('other', x.shape[0] * (2 * d_in * t + 2 * t * d_out))
    return (y, FFNCache(x, a, hidden)) if return_cache else y


def vanilla_ffn_backward(grad_y, x, p, cache=None):
    '''Returns (grad_x, grad_W, grad_V).'''
    if cache is None:
        _, cache = vanilla_ffn_forward(x, p, return_cache=True)
    grad_y = np.asarray(grad_y)
    if grad_y.shape != (cache.x.shape[0], p.V.shape[1]):
        raise SizeError('gradient has shape {}'.format(grad_y.shape))
    grad_V = cache.hidden.T @ grad_y
    grad_a = _activation_backward(grad_y @ p.V.T, cache.a, cache.hidden, p.activation)
    return grad_a @ p.W, grad_a.T @ cache.x, grad_V


class DenseFFN:
    '''Dense FFN behind the same forward/backward/parameters protocol as LookupFFN.'''

    def __init__(self, params):
        self.params = params

    @classmethod
    def build(cls, d_in, t, d_out, activation='gelu', seed=0, dtype=np.float64):
        return cls(init_ffn(d_in, t, d_out, activation, seed, dtype))

    def forward(self, x, counter=None, **kwargs):
        return vanilla_ffn_forward(x, self.params, counter=counter, return_cache=True)

    def backward(self, grad_y, cache, **kwargs):
        grad_x, grad_W, grad_V = vanilla_ffn_backward(grad_y, cache.x, self.params, cache)
        return grad_x, {'W': grad_W, 'V': grad_V}

    def parameters(self):
        return self.params.arrays()

    def writable(self, name):
        return nullcontext(self.parameters()[name])


# hyperplane LSH over the rows of W

@dataclass
class LSHEnsemble:
    L: int
    tau: int
    projections: np.ndarray
    buckets: list = field(default_factory=list)
    unit_codes: np.ndarray = None

    def codes(self, x):
        '''Codes of the rows of x in every table, shape (n, L).'''
        z = np.einsum('nd,ldt->nlt', np.atleast_2d(x), self.projections)
        return compute_codes(z).G

    def prefix(self, L):
        # the first L tables; nested ensembles make recall monotone in L
        return LSHEnsemble(
            L=L, tau=self.tau, projections=self.projections[:L],
            buckets=self.buckets[:L], unit_codes=self.unit_codes[:, :L],
        )


def build_lsh_ensemble(W, L, tau, seed=0):
    '''
    Hashes the rows of W into L tables of tau Gaussian hyperplanes each.
    '''
    W = np.asarray(W, dtype=np.float64)
    rng = np.random.default_rng(seed)
    projections = rng.standard_normal((L, W.shape[1], tau))
    ensemble = LSHEnsemble(L=L, tau=tau, projections=projections)
    ensemble.unit_codes = ensemble.codes(W)
    for table in range(L):
        bucket = defaultdict(list)
        for unit, code in enumerate(ensemble.unit_codes[:, table]):
            bucket[int(code)].append(unit)
        ensemble.buckets.append(
            {code: np.array(units) for code, units in bucket.items()})
    return ensemble


def retrieve(ensemble, x):
    '''The retrieval set S(x): units that share a bucket with x in some table.'''
    codes = ensemble.codes(x)[0]
    found = [
        ensemble.buckets[table].get(int(code), np.empty(0, dtype=int))
        for table, code in enumerate(codes)
    ]
    return np.unique(np.concatenate(found)) if found else np.empty(0, dtype=int)


def lsh_recall_experiment(W, queries, hash_counts, tau=8, top_x=(1, 8, 32, 128),
                          seed=0):
    '''
    Recall of brute-force top-x inner-product neighbours by union-of-buckets
        retrieval, for every table budget in hash_counts.

    Returns rows (budget, top_x, recall, mean_retrieved, std_retrieved).
    '''
    W = np.asarray(W, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    top_x = [x for x in top_x if x <= W.shape[0]]
    full = build_lsh_ensemble(W, max(hash_counts), tau, seed)
    scores = queries @ W.T
    ranking = np.argsort(-scores, axis=1, kind='stable')
    rows = []
    for budget in sorted(hash_counts):
        ensemble = full.prefix(budget)
        retrieved = [retrieve(ensemble, q) for q in queries]
        sizes = np.array([len(r) for r in retrieved])
        for x in top_x:
            hits = [
                np.isin(ranking[i, :x], retrieved[i]).mean()
                for i in range(len(queries))
            ]
            rows.append({
                'budget': budget,
                'top_x': x,
                'recall': float(np.mean(hits)),
                'mean_retrieved': float(sizes.mean()),
                'std_retrieved': float(sizes.std()),
            })
    return rows


@dataclass
class BucketStats:
    sizes: np.ndarray
    max_mean_ratio: float
    gini: float

    def as_row(self):
        return {
            'buckets': len(self.sizes),
            'largest': int(self.sizes[0]),
            'max_mean_ratio': self.max_mean_ratio,
            'gini': self.gini,
        }


def gini(values):
    values = np.sort(np.asarray(values, dtype=np.float64))
    total = values.sum()
    if total == 0:
        return 0.0
    n = len(values)
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * values) / (n * total))


def bucket_histogram(ensemble, W=None, table=0):
    '''
    Occupancy of all 2^tau buckets of one table, sorted descending, with
        max/mean ratio and Gini coefficient.
    '''
    codes = ensemble.unit_codes if W is None else ensemble.codes(W)
    sizes = np.bincount(codes[:, table], minlength=1 << ensemble.tau)
    sizes = np.sort(sizes)[::-1]
    return BucketStats(
        sizes=sizes, max_mean_ratio=float(sizes[0] / sizes.mean()), gini=gini(sizes))


def correlated_weights(t, d, shared=3.0, seed=0):
    # every row carries the same component, so the rows crowd into few buckets
    rng = np.random.default_rng(seed)
    common = rng.standard_normal(d)
    return shared * common + rng.standard_normal((t, d))


@dataclass
class YosoTables:
    T: np.ndarray


def build_yoso_tables(W, V, ensemble):
    '''T[k][j] = (1/L) * sum of V_i over the units hashed to bucket j of table k.'''
    V = np.asarray(V, dtype=np.float64)
    T = np.zeros((ensemble.L, 1 << ensemble.tau, V.shape[1]))
    codes = ensemble.codes(W)
    for table in range(ensemble.L):
        np.add.at(T[table], codes[:, table], V)
    return YosoTables(T=T / ensemble.L)


def collision_probability(x, W, tau):
    '''Probability that x and W_i share a tau-bit hyperplane code: (1 - theta/pi)^tau.'''
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    cos = (W @ x) / (np.linalg.norm(W, axis=1) * np.linalg.norm(x))
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    return (1.0 - theta / np.pi) ** tau


def yoso_estimate(x, W, V, ensemble, tables=None):
    '''
    y_hat = sum_k T_k[f_k(x)] and its squared error against the exact
        collision-probability weighted sum.

    Returns (y_hat, mse).
    '''
    if tables is None:
        tables = build_yoso_tables(W, V, ensemble)
    codes = ensemble.codes(x)[0]
    y_hat = tables.T[np.arange(ensemble.L), codes].sum(axis=0)
    exact = collision_probability(x, W, ensemble.tau) @ np.asarray(V)
    return y_hat, float(np.mean((y_hat - exact) ** 2))


def yoso_variance_experiment(t=256, d=64, d_out=16, tau=4, table_counts=(8, 32, 128, 512),
                             seeds=range(10), queries=8):
    '''Mean y_hat MSE for each table count, averaged over seeds and queries.'''
    rows = []
    for L in table_counts:
        errors = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            W = rng.standard_normal((t, d))
            V = rng.standard_normal((t, d_out))
            xs = rng.standard_normal((queries, d))
            ensemble = build_lsh_ensemble(W, L, tau, seed=seed + 1000)
            tables = build_yoso_tables(W, V, ensemble)
            errors += [yoso_estimate(x, W, V, ensemble, tables)[1] for x in xs]
        rows.append({'tables': L, 'mse': float(np.mean(errors))})
        logger.info('yoso estimator: L=%s mse=%.4g', L, rows[-1]['mse'])
    return rows
