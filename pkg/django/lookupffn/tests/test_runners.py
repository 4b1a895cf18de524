import math
from unittest.mock import patch

from django.test import SimpleTestCase

from lookupffn import runners
from lookupffn.exceptions import ConfigError


class ParseSizesTestCase(SimpleTestCase):

    def test_strings_and_lists(self):
        self.assertEqual(runners.parse_sizes('512, 2048,512'), [512, 2048, 512])
        self.assertEqual(runners.parse_sizes([1, 2], 2), [1, 2])
        with self.assertRaises(ConfigError):
            runners.parse_sizes('a,b')
        with self.assertRaises(ConfigError):
            runners.parse_sizes('1,2,3', 2)

    def test_malformed_values(self):
        with self.assertRaises(ConfigError):
            runners.parse_sizes(512, 3)
        with self.assertRaises(ConfigError):
            runners.run('flops', {'vanilla': 512})
        with self.assertRaises(ConfigError):
            runners.run('train-toy', {'steps': 'many'})

    def test_numeric_strings_are_coerced(self):
        self.assertEqual(runners._get({'h': '8'}, 'h', 64), 8)
        self.assertEqual(runners._get({'lr': '0.5'}, 'lr', 1e-3), 0.5)
        self.assertEqual(runners._get({'variant': 'softmax'}, 'variant', 'scaled'), 'softmax')
        rows = runners.run('grad-check', {'model': 'projection', 'm': '2'})
        self.assertTrue(all(row['passed'] for row in rows))

    def test_unknown_experiment(self):
        with self.assertRaises(ConfigError):
            runners.run('fly', {})


class RunnersTestCase(SimpleTestCase):

    def test_tau_sweep(self):
        rows = runners.run('sweep', {'target': 'tau', 'steps': 0})
        self.assertEqual([row['h_tau'] for row in rows], [256, 256, 252])
        with self.assertRaises(ConfigError):
            runners.run('sweep', {'target': 'tau', 'grid': '64,4,32'})
        with self.assertRaises(ConfigError):
            runners.run('sweep', {'target': 'depth'})

    def test_tau_sweep_with_training(self):
        rows = runners.run('sweep', {'grid': '8,4', 'd': 16, 'steps': 3, 'seeds': '0'})
        self.assertTrue(math.isfinite(rows[0]['final_mse']))

    def test_projection_sweep(self):
        rows = runners.run('sweep', {'target': 'projection', 'width': 8, 'steps': 5,
                                     'seeds': '0,1'})
        self.assertEqual({row['seed'] for row in rows}, {0, 1})
        self.assertIn('acdc', {row['kind'] for row in rows})

    def test_yoso_sweep(self):
        rows = runners.run('sweep', {'target': 'yoso', 'seeds': '0'})
        self.assertEqual([row['tables'] for row in rows], [8, 32, 128, 512])

    def test_approx_matrix(self):
        rows = runners.run('approx-matrix', {'width': 16, 'steps': 5})
        self.assertEqual([row['kind'] for row in rows],
                         ['dense', 'bh', 'bh', 'shuffle', 'acdc', 'signflip'])
        rows = runners.run('approx-matrix', {'width': 16, 'steps': 5, 'kind': 'acdc', 'k': 2})
        self.assertEqual(rows[0]['k'], 2)

    def test_lsh_diagnostics(self):
        rows = runners.run('lsh-diag', {'t': 256, 'd': 16, 'queries': 8,
                                        'budgets': '1,4', 'correlated': True})
        sections = [row['section'] for row in rows]
        self.assertEqual(sections[-2:], ['buckets', 'reads'])
        self.assertEqual(sections.count('recall'), 8)
        self.assertEqual(rows[-1]['var_reads'], 0.0)

    @patch('lookupffn.runners.baselines.lsh_recall_experiment', return_value=[])
    def test_lsh_diagnostics_defaults(self, recall):
        rows = runners.run('lsh-diag', {'budgets': '1'})
        W, queries, budgets = recall.call_args[0]
        self.assertEqual(W.shape, (2048, 512))
        self.assertEqual(queries.shape, (256, 512))
        self.assertEqual(budgets, [1])
        self.assertEqual(rows[0]['buckets'], 256)

    def test_bench_both_kernels(self):
        rows = runners.run('bench', {'d': 32, 'lookup': '8,4', 'b': 8, 'rows': 8,
                                     'repetitions': 3, 'threads': 1, 'kernel': 'both'})
        self.assertEqual([row['kernel'] for row in rows], ['gemm', 'portable', 'sorted'])
        self.assertEqual(rows[0]['speedup'], 1.0)

    def test_train_toy(self):
        rows = runners.run('train-toy', {'student': 'dense-t64', 'steps': 3, 'd': 8,
                                         't': 16, 'task': 'toy-classification'})
        self.assertEqual([row['step'] for row in rows], [0, 1, 2])
        self.assertEqual(set(rows[0]), {'step', 'loss', 'wall_ms'})

    def test_grad_check_projection(self):
        rows = runners.run('grad-check', {'model': 'projection', 'm': 2})
        self.assertTrue(all(row['passed'] for row in rows))
