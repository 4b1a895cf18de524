import numpy as np

from django.test import SimpleTestCase, override_settings

from lookupffn.baselines import DenseFFN
from lookupffn.exceptions import AuditError, ConfigError
from lookupffn.flop_model import (
    FlopCounter, FlopReport, bh_block_flops, bh_flops, lookup_flops,
    projection_flops, published_reference_rows, runtime_flop_audit,
    shuffle_flops, vanilla_flops,)
from lookupffn.lookup_core import LookupConfig, LookupFFN
from lookupffn.structured_proj import KINDS, ProjectionSpec, init_projection


def small_lookup(h=128, tau=8, d=512, **kwargs):
    return LookupConfig(d_in=d, d_out=d, h=h, tau=tau, variant='scaled', **kwargs)


def assert_within(test, value, expected, tolerance):
    test.assertLessEqual(
        abs(value - expected), tolerance * expected,
        msg='{} is not within {:.0%} of {}'.format(value, tolerance, expected))


class AnalyticFlopsTestCase(SimpleTestCase):

    def test_vanilla_ffn(self):
        self.assertEqual(vanilla_flops(512, 2048, 512).as_row(2)['total_mflop'], '4.19')
        self.assertEqual(vanilla_flops(768, 3072, 768).as_row(2)['total_mflop'], '9.44')
        self.assertAlmostEqual(vanilla_flops(512, 2048, 512).total_mflop, 4.194304)

    def test_bh4_hash_cost_by_block_size(self):
        for block, expected in ((64, 0.56), (32, 0.30), (16, 0.17)):
            report = lookup_flops(small_lookup(), b=block)
            assert_within(self, report.hash_mflop, expected, 0.02)

    def test_dense_hash_and_gather(self):
        report = lookup_flops(small_lookup(), kind='dense')
        assert_within(self, report.hash_mflop, 1.05, 0.02)
        assert_within(self, report.gather_mflop, 0.13, 0.02)

    def test_lookup_total(self):
        assert_within(self, lookup_flops(small_lookup(h=256)).total_mflop, 1.38, 0.03)

    def test_gather_shrinks_as_tau_grows_at_fixed_width(self):
        reports = [lookup_flops(small_lookup(h=h, tau=tau)) for h, tau in ((64, 4), (32, 8), (16, 16))]
        hashes = [report.hash_mflop for report in reports]
        self.assertTrue(max(hashes) <= min(hashes) * 1.02)
        gathers = [report.gather_mflop for report in reports]
        self.assertTrue(all(b < a for a, b in zip(gathers, gathers[1:])))

    def test_reference_rows_are_close_to_published_values(self):
        rows = published_reference_rows()
        published = [(report, value) for report, value in rows if value is not None]
        self.assertEqual(len(published), 8)
        for report, value in published:
            assert_within(self, report.total_mflop, value, 0.03)
        notes = [report.note for report, _ in rows if report.note]
        self.assertEqual(notes, ['block size 64 inferred'])

    def test_neighbours_multiply_gather_cost(self):
        one = lookup_flops(small_lookup())
        four = lookup_flops(small_lookup(neighbor_count=4))
        self.assertAlmostEqual(four.gather_mflop, 4 * one.gather_mflop)
        self.assertEqual(four.hash_mflop, one.hash_mflop)

    @override_settings(LOOKUPFFN={'WEIGHT_COST': 0})
    def test_weight_cost_is_configurable(self):
        self.assertEqual(lookup_flops(small_lookup()).other_mflop, 0.0)

    def test_bh1_blocks_cost_as_much_as_grouped_shuffle(self):
        D = 64
        for b in (4, 8, 16):
            self.assertEqual(bh_block_flops(D, 1, b), shuffle_flops(D, 1, b))
            self.assertEqual(bh_block_flops(D, 1, b), projection_flops('shuffle', D, D, m=1, b=b))
            # BH1 pays the block multiply plus one transform
            self.assertEqual(projection_flops('bh', D, D, m=1, b=b) - bh_block_flops(D, 1, b),
                             D * 6)
            counts = [
                init_projection(ProjectionSpec(D, D, kind), seed=0, m=1, b=b).parameter_count
                for kind in ('bh', 'shuffle')
            ]
            self.assertEqual(counts[0], counts[1])

    def test_bh_cost_grows_with_block_size_and_depth(self):
        by_block = [bh_flops(1024, 4, b) for b in (2, 4, 8, 16, 32, 64, 128, 1024)]
        self.assertTrue(all(a < b for a, b in zip(by_block, by_block[1:])))
        by_depth = [bh_flops(1024, m, 64) for m in range(1, 9)]
        self.assertTrue(all(a < b for a, b in zip(by_depth, by_depth[1:])))

    def test_unknown_projection(self):
        with self.assertRaises(ConfigError):
            projection_flops('fft', 8, 8)

    def test_report_validation_and_rows(self):
        with self.assertRaises(ConfigError):
            FlopReport(hash_mflop=-1.0)
        row = FlopReport(1.0, 2.0, 3.0, label='x').as_row()
        self.assertEqual(row['total_mflop'], 6.0)
        self.assertEqual(list(row), [
            'label', 'hash_mflop', 'gather_mflop', 'other_mflop', 'total_mflop', 'note'])

    def test_counter_report_is_per_token(self):
        counter = FlopCounter()
        counter.add('hash', 4e6)
        counter.add('other', 2e6)
        report = counter.report(tokens=2)
        self.assertEqual((report.hash_mflop, report.gather_mflop, report.other_mflop),
                         (2.0, 0.0, 1.0))
        counter.reset()
        self.assertEqual(counter.report().total_mflop, 0.0)


class RuntimeAuditTestCase(SimpleTestCase):

    def setUp(self):
        self.x = np.random.default_rng(0).standard_normal((5, 24))

    def test_instrumented_kernels_match_the_model(self):
        cfg = LookupConfig(d_in=24, d_out=16, h=6, tau=5, neighbor_count=3)
        for kind in KINDS:
            model = LookupFFN.build(cfg, kind=kind, seed=0, m=3, b=8, k=2)
            expected = lookup_flops(cfg, kind=kind, m=3, b=8, k=2)
            measured = runtime_flop_audit(model, self.x, expected)
            self.assertAlmostEqual(measured.total_mflop, expected.total_mflop, msg=kind)

    def test_dense_ffn_audit(self):
        model = DenseFFN.build(24, 96, 24)
        runtime_flop_audit(model, self.x, vanilla_flops(24, 96, 24))

    def test_mismatch_names_the_stage(self):
        cfg = LookupConfig(d_in=24, d_out=16, h=6, tau=5)
        model = LookupFFN.build(cfg, seed=0, m=3, b=8)
        report = lookup_flops(cfg, m=3, b=8)
        wrong = FlopReport(report.hash_mflop, 2 * report.gather_mflop, report.other_mflop)
        with self.assertRaises(AuditError) as ctx:
            runtime_flop_audit(model, self.x, wrong)
        self.assertEqual(ctx.exception.stage, 'gather')
        self.assertEqual(ctx.exception.exit_status, 2)
