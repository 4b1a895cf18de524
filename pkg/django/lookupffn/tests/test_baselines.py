import math

import numpy as np

from django.test import SimpleTestCase

from lookupffn.baselines import (
    DenseFFN, FFNParams, bucket_histogram, build_lsh_ensemble,
    build_yoso_tables, collision_probability, correlated_weights, gini,
    init_ffn, lsh_recall_experiment, retrieve, vanilla_ffn_backward,
    vanilla_ffn_forward, yoso_estimate, yoso_variance_experiment,)
from lookupffn.exceptions import ConfigError, SizeError
from lookupffn.flop_model import FlopCounter, vanilla_flops


class VanillaFFNTestCase(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.params = init_ffn(8, 16, 4, 'gelu', seed=0)

    def test_forward_matches_formula(self):
        x = self.rng.standard_normal((3, 8))
        a = x @ self.params.W.T
        gelu = np.array([[0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in row] for row in a])
        np.testing.assert_allclose(vanilla_ffn_forward(x, self.params), gelu @ self.params.V,
                                   rtol=1e-12)

    def test_softmax_and_sigmoid_activations(self):
        x = self.rng.standard_normal((3, 8))
        for activation in ('sigmoid', 'softmax'):
            params = FFNParams(W=self.params.W, V=self.params.V, activation=activation)
            a = x @ params.W.T
            if activation == 'sigmoid':
                hidden = 1 / (1 + np.exp(-a))
            else:
                hidden = np.exp(a) / np.exp(a).sum(axis=1, keepdims=True)
            np.testing.assert_allclose(vanilla_ffn_forward(x, params), hidden @ params.V,
                                       rtol=1e-12)

    def test_counter_matches_flop_model(self):
        counter = FlopCounter()
        vanilla_ffn_forward(np.ones((5, 8)), self.params, counter=counter)
        report = counter.report(tokens=5)
        self.assertAlmostEqual(report.other_mflop, vanilla_flops(8, 16, 4).other_mflop)

    def test_backward_without_cache_recomputes(self):
        x = self.rng.standard_normal((3, 8))
        g = self.rng.standard_normal((3, 4))
        _, cache = vanilla_ffn_forward(x, self.params, return_cache=True)
        with_cache = vanilla_ffn_backward(g, x, self.params, cache)
        without = vanilla_ffn_backward(g, x, self.params)
        for a, b in zip(with_cache, without):
            np.testing.assert_array_equal(a, b)

    def test_model_protocol(self):
        model = DenseFFN(self.params)
        y, cache = model.forward(np.ones((2, 8)))
        grad_x, grads = model.backward(np.ones_like(y), cache)
        self.assertEqual(set(grads), {'W', 'V'})
        with model.writable('W') as W:
            self.assertIs(W, self.params.W)

    def test_invalid_parameters(self):
        with self.assertRaises(SizeError):
            FFNParams(W=np.zeros((4, 8)), V=np.zeros((5, 2)))
        with self.assertRaises(ConfigError):
            FFNParams(W=np.zeros((4, 8)), V=np.zeros((4, 2)), activation='relu')
        with self.assertRaises(SizeError):
            vanilla_ffn_forward(np.zeros((2, 7)), self.params)


class LSHTestCase(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.W = self.rng.standard_normal((1024, 64))
        self.queries = self.rng.standard_normal((32, 64))

    def test_recall_grows_with_the_number_of_tables(self):
        rows = lsh_recall_experiment(self.W, self.queries, (1, 2, 4, 8, 16, 32), tau=8)
        for x in (1, 8, 32, 128):
            recall = [row['recall'] for row in rows if row['top_x'] == x]
            self.assertEqual(len(recall), 6)
            self.assertTrue(all(b >= a for a, b in zip(recall, recall[1:])), msg=recall)
        small = [row['recall'] for row in rows if row['budget'] == 1 and row['top_x'] == 128]
        self.assertLess(small[0], 1.0)
        sizes = [row['mean_retrieved'] for row in rows if row['top_x'] == 1]
        self.assertTrue(all(b >= a for a, b in zip(sizes, sizes[1:])))

    def test_retrieve_finds_the_unit_itself(self):
        ensemble = build_lsh_ensemble(self.W, 4, 8, seed=1)
        self.assertIn(17, retrieve(ensemble, self.W[17]))

    def test_prefix_shares_tables(self):
        ensemble = build_lsh_ensemble(self.W, 8, 6, seed=1)
        prefix = ensemble.prefix(3)
        np.testing.assert_array_equal(prefix.codes(self.queries), ensemble.codes(self.queries)[:, :3])

    def test_correlated_weights_skew_the_buckets(self):
        W = correlated_weights(1024, 64, seed=2)
        stats = bucket_histogram(build_lsh_ensemble(W, 1, 8, seed=3))
        self.assertEqual(len(stats.sizes), 256)
        self.assertEqual(int(stats.sizes.sum()), 1024)
        self.assertGreater(stats.max_mean_ratio, 2.0)
        self.assertTrue(np.all(np.diff(stats.sizes) <= 0))

    def test_retrieval_cost_varies_on_skewed_weights(self):
        W = correlated_weights(1024, 64, seed=2)
        rows = lsh_recall_experiment(W, self.queries, (1, 4), tau=8)
        self.assertTrue(all(row['std_retrieved'] > 0 for row in rows))

    def test_orthonormal_rows_split_evenly_on_one_bit(self):
        t = 256
        for seed in range(10):
            W, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((t, t)))
            stats = bucket_histogram(build_lsh_ensemble(W, 1, 1, seed=seed))
            self.assertEqual(len(stats.sizes), 2)
            self.assertEqual(int(stats.sizes.sum()), t)
            self.assertLessEqual(abs(int(stats.sizes[0]) - t // 2), 0.15 * t)

    def test_gini(self):
        self.assertEqual(gini([1, 1, 1, 1]), 0.0)
        self.assertAlmostEqual(gini([0, 0, 0, 4]), 0.75)
        self.assertEqual(gini([0, 0]), 0.0)


class YosoEstimatorTestCase(SimpleTestCase):

    def test_collision_probability_of_identical_vectors(self):
        W = np.random.default_rng(0).standard_normal((3, 5))
        np.testing.assert_allclose(collision_probability(W[1], W, 4)[1], 1.0)
        self.assertAlmostEqual(
            float(collision_probability(np.array([1.0, 0.0]), np.array([[-1.0, 0.0]]), 2)[0]), 0.0)

    def test_tables_sum_values_per_bucket(self):
        rng = np.random.default_rng(1)
        W = rng.standard_normal((20, 6))
        V = rng.standard_normal((20, 3))
        ensemble = build_lsh_ensemble(W, 2, 3, seed=0)
        tables = build_yoso_tables(W, V, ensemble)
        self.assertEqual(tables.T.shape, (2, 8, 3))
        np.testing.assert_allclose(tables.T.sum(axis=(0, 1)), V.sum(axis=0))

    def test_one_table_with_every_unit_in_the_query_bucket(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(6)
        W = rng.uniform(0.5, 2.0, size=(10, 1)) * x
        V = rng.standard_normal((10, 3))
        ensemble = build_lsh_ensemble(W, 1, 4, seed=0)
        y_hat, mse = yoso_estimate(x, W, V, ensemble)
        np.testing.assert_allclose(y_hat, V.sum(axis=0), rtol=1e-12)
        self.assertAlmostEqual(mse, 0.0, places=10)

    def test_rebuilding_after_a_weight_change_changes_the_tables(self):
        rng = np.random.default_rng(4)
        W = rng.standard_normal((20, 6))
        V = rng.standard_normal((20, 3))
        ensemble = build_lsh_ensemble(W, 2, 3, seed=0)
        before = build_yoso_tables(W, V, ensemble).T
        after = build_yoso_tables(W + 2.0 * rng.standard_normal(W.shape), V, ensemble).T
        self.assertFalse(np.array_equal(before, after))

    def test_estimate_shape(self):
        rng = np.random.default_rng(2)
        W = rng.standard_normal((20, 6))
        V = rng.standard_normal((20, 3))
        ensemble = build_lsh_ensemble(W, 4, 3, seed=0)
        y_hat, mse = yoso_estimate(rng.standard_normal(6), W, V, ensemble)
        self.assertEqual(y_hat.shape, (3,))
        self.assertGreaterEqual(mse, 0.0)

    def test_error_shrinks_with_more_tables(self):
        rows = yoso_variance_experiment(t=128, d=16, d_out=4, tau=4,
                                        table_counts=(4, 256), seeds=range(3))
        self.assertEqual([row['tables'] for row in rows], [4, 256])
        self.assertLess(rows[1]['mse'], rows[0]['mse'])
