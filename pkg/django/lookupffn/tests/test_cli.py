import csv
import io
import json
import os
import tempfile
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from lookupffn.exceptions import NumericError
from lookupffn.management.commands.lffn import Command


def lffn(*args):
    out = io.StringIO()
    call_command('lffn', *args, stdout=out)
    return out.getvalue()


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class FlopsCommandTestCase(SimpleTestCase):

    def test_vanilla_report(self):
        output = lffn('flops', '--vanilla', '512,2048,512')
        self.assertEqual(output.splitlines(), [
            'label,hash_mflop,gather_mflop,other_mflop,total_mflop,note',
            'vanilla 512x2048x512,0.00,0.00,4.19,4.19,',
        ])

    def test_reference_rows(self):
        parsed = rows(lffn('flops', '--reference'))
        self.assertIn('published', parsed[0])
        published = {row['label']: row['published'] for row in parsed}
        self.assertEqual(published['small vanilla'], '4.19')
        self.assertEqual(published['small lookup h=256 tau=8'], '1.38')

    def test_lookup_with_audit(self):
        parsed = rows(lffn('flops', '--lookup', '128,8', '--audit', '--precision', '3'))
        self.assertEqual(parsed[0]['gather_mflop'], '0.131')

    def test_malformed_sizes(self):
        with self.assertRaises(CommandError) as ctx:
            lffn('flops', '--lookup', '128')
        self.assertEqual(ctx.exception.returncode, 1)

    def test_nothing_to_report(self):
        with self.assertRaises(CommandError) as ctx:
            lffn('flops')
        self.assertEqual(ctx.exception.returncode, 1)

    def test_numeric_errors_exit_with_2(self):
        with mock.patch('lookupffn.management.commands.lffn.runners.run',
                        side_effect=NumericError('hash')):
            with self.assertRaises(CommandError) as ctx:
                lffn('flops', '--vanilla', '8,8,8')
        self.assertEqual(ctx.exception.returncode, 2)


class GradCheckCommandTestCase(SimpleTestCase):

    def test_full_neighbourhood_passes(self):
        parsed = rows(lffn('grad-check', '--tau', '3', '--full-neighbors'))
        self.assertEqual({row['passed'] for row in parsed}, {'True'})
        self.assertIn('tables', [row['parameter'] for row in parsed])

    def test_failing_check_exits_with_2(self):
        with self.assertRaises(CommandError) as ctx:
            lffn('grad-check', '--model', 'vanilla', '--threshold', '0')
        self.assertEqual(ctx.exception.returncode, 2)


class CommandLineTestCase(SimpleTestCase):

    def run_from_argv(self, *args):
        with mock.patch('sys.stdout', new_callable=io.StringIO) as stdout, \
                mock.patch('sys.stderr', new_callable=io.StringIO):
            with self.assertRaises(SystemExit) as ctx:
                Command().run_from_argv(['manage.py', 'lffn', *args])
        return ctx.exception.code, stdout.getvalue()

    def test_no_subcommand_prints_help(self):
        code, output = self.run_from_argv()
        self.assertEqual(code, 1)
        self.assertIn('grad-check', output)

    def test_unknown_flag_is_a_usage_error(self):
        code, _ = self.run_from_argv('flops', '--frobnicate')
        self.assertEqual(code, 1)

    def test_unknown_subcommand_is_a_usage_error(self):
        code, _ = self.run_from_argv('fly')
        self.assertEqual(code, 1)


class OutputAndConfigTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def config(self, text):
        path = os.path.join(self.tmp.name, 'run.env')
        with open(path, 'w') as fh:
            fh.write(text)
        return path

    def test_config_fills_missing_flags(self):
        path = self.config('tau=3\nfull-neighbors=true\n')
        parsed = rows(lffn('grad-check', '--config', path))
        self.assertEqual({row['passed'] for row in parsed}, {'True'})

    def test_command_line_wins_over_config(self):
        path = self.config('vanilla=768,3072,768\n')
        parsed = rows(lffn('flops', '--vanilla', '512,2048,512', '--config', path))
        self.assertEqual(parsed[0]['total_mflop'], '4.19')
        parsed = rows(lffn('flops', '--config', path))
        self.assertEqual(parsed[0]['total_mflop'], '9.44')

    def test_bad_config(self):
        for text in ('colour=red\n', 'precision=two\n', 'projection=fft\n'):
            with self.assertRaises(CommandError, msg=text):
                lffn('flops', '--vanilla', '8,8,8', '--config', self.config(text))
        with self.assertRaises(CommandError):
            lffn('flops', '--config', os.path.join(self.tmp.name, 'missing.env'))

    def test_output_file(self):
        path = os.path.join(self.tmp.name, 'reports', 'flops.csv')
        self.assertEqual(lffn('flops', '--vanilla', '512,2048,512', '--output', path), '')
        with open(path) as fh:
            self.assertEqual(rows(fh.read())[0]['total_mflop'], '4.19')

    def test_json_format(self):
        parsed = json.loads(lffn('flops', '--vanilla', '768,3072,768', '--format', 'json'))
        self.assertEqual(parsed[0]['total_mflop'], '9.44')

    def test_checkpoint_round_trip(self):
        path = os.path.join(self.tmp.name, 'layer.lffn')
        parsed = rows(lffn('checkpoint-io', '--path', path, '--projection', 'acdc'))
        self.assertEqual(float(parsed[0]['max_param_diff']), 0.0)
        self.assertEqual(float(parsed[0]['max_output_diff']), 0.0)
        self.assertTrue(os.path.exists(path))
