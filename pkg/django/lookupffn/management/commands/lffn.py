import argparse
import csv
import io
import json
import logging
import os
import sys

from django.core.management.base import BaseCommand, CommandError
from dotenv import dotenv_values

from lookupffn import runners
from lookupffn.exceptions import LookupFFNError
from lookupffn.lookup_core import VARIANTS
from lookupffn.structured_proj import KINDS
from lookupffn.train_harness import DEFAULT_STUDENTS, OPTIMIZERS, TASKS

logger = logging.getLogger(__name__)

COMMON_DESTS = ('config', 'output', 'format')


class Command(BaseCommand):
    '''
    Front door of the lookupffn experiments:

        manage.py lffn <subcommand> [flags]

    Rows are written as CSV (or JSON) to --output, stdout by default. Exit
        status is 0 on success, 1 on invalid usage or configuration and 2 on
        numeric, audit or gradient-check failures.
    '''
    help = 'Runs LookupFFN experiments and writes their rows as CSV.'

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._subparsers = {}
        self._handled = False

    def add_arguments(self, parser):
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument('--config', help='key=value file filling flags not given')
        common.add_argument('--output', default='-', help='output path, - for stdout')
        common.add_argument('--format', choices=('csv', 'json'), default='csv')
        common.add_argument('--seed', type=int)

        subparsers = parser.add_subparsers(
            dest='subcommand', metavar='subcommand',
            parser_class=argparse.ArgumentParser,
        )
        subparsers.required = True

        def add(name, help):
            sub = subparsers.add_parser(name, parents=[common], help=help)
            self._subparsers[name] = sub
            return sub

        sub = add('flops', 'analytic per-token MFLOP report')
        sub.add_argument('--vanilla', metavar='D_IN,T,D_OUT')
        sub.add_argument('--lookup', metavar='H,TAU')
        sub.add_argument('--d', type=int, help='model width of the lookup layer')
        sub.add_argument('--projection', choices=KINDS)
        sub.add_argument('--m', type=int)
        sub.add_argument('--b', type=int)
        sub.add_argument('--neighbors', type=int)
        sub.add_argument('--reference', action='store_true', default=None,
                         help='add the published configurations')
        sub.add_argument('--audit', action='store_true', default=None,
                         help='check the lookup report against instrumented kernels')
        sub.add_argument('--precision', type=int)

        sub = add('grad-check', 'finite-difference gradient check')
        sub.add_argument('--model', choices=('lookup', 'vanilla', 'projection'))
        sub.add_argument('--d', type=int)
        sub.add_argument('--h', type=int)
        sub.add_argument('--tau', type=int)
        sub.add_argument('--t', type=int)
        sub.add_argument('--projection', choices=KINDS)
        sub.add_argument('--m', type=int)
        sub.add_argument('--b', type=int)
        sub.add_argument('--variant', choices=VARIANTS)
        sub.add_argument('--neighbors', type=int)
        sub.add_argument('--full-neighbors', action='store_true', default=None)
        sub.add_argument('--activation', choices=('gelu', 'sigmoid', 'softmax'))
        sub.add_argument('--rows', type=int)
        sub.add_argument('--threshold', type=float)

        sub = add('train-toy', 'desk-scale training, writes the loss curve')
        sub.add_argument('--task', choices=TASKS)
        sub.add_argument('--student', choices=sorted(DEFAULT_STUDENTS))
        sub.add_argument('--steps', type=int)
        sub.add_argument('--batch', type=int)
        sub.add_argument('--lr', type=float)
        sub.add_argument('--optimizer', choices=OPTIMIZERS)
        sub.add_argument('--d', type=int)
        sub.add_argument('--t', type=int)
        sub.add_argument('--log-every', type=int)

        sub = add('sweep', 'tau trade-off, projection or estimator sweeps')
        sub.add_argument('--target', choices=('tau', 'projection', 'yoso'))
        sub.add_argument('--grid', metavar='H,TAU,H,TAU,...')
        sub.add_argument('--seeds', metavar='S,S,...')
        sub.add_argument('--steps', type=int)
        sub.add_argument('--d', type=int)
        sub.add_argument('--width', type=int)
        sub.add_argument('--tau', type=int)
        sub.add_argument('--b', type=int)

        sub = add('bench', 'forward latency of LookupFFN against the dense FFN')
        sub.add_argument('--vanilla', metavar='D_IN,T,D_OUT')
        sub.add_argument('--lookup', metavar='H,TAU')
        sub.add_argument('--d', type=int)
        sub.add_argument('--rows', type=int)
        sub.add_argument('--repetitions', type=int)
        sub.add_argument('--warmup', type=int)
        sub.add_argument('--threads', type=int)
        sub.add_argument('--kernel', choices=('portable', 'sorted', 'both'))
        sub.add_argument('--dtype', choices=('float32', 'float64'))
        sub.add_argument('--projection', choices=KINDS)
        sub.add_argument('--m', type=int)
        sub.add_argument('--b', type=int)

        sub = add('lsh-diag', 'LSH recall, bucket skew and table-read regularity')
        sub.add_argument('--t', type=int)
        sub.add_argument('--d', type=int)
        sub.add_argument('--tau', type=int)
        sub.add_argument('--h', type=int)
        sub.add_argument('--b', type=int)
        sub.add_argument('--budgets', metavar='L,L,...')
        sub.add_argument('--queries', type=int)
        sub.add_argument('--correlated', action='store_true', default=None)

        sub = add('approx-matrix', 'fit structured projections to a random matrix')
        sub.add_argument('--width', type=int)
        sub.add_argument('--kind', choices=KINDS)
        sub.add_argument('--m', type=int)
        sub.add_argument('--b', type=int)
        sub.add_argument('--k', type=int)
        sub.add_argument('--steps', type=int)

        sub = add('checkpoint-io', 'save and reload a layer checkpoint')
        sub.add_argument('--path')
        sub.add_argument('--d', type=int)
        sub.add_argument('--h', type=int)
        sub.add_argument('--tau', type=int)
        sub.add_argument('--variant', choices=VARIANTS)
        sub.add_argument('--neighbors', type=int)
        sub.add_argument('--projection', choices=KINDS)
        sub.add_argument('--m', type=int)
        sub.add_argument('--b', type=int)

    def run_from_argv(self, argv):
        if len(argv) <= 2:
            self.print_help(argv[0], argv[1])
            sys.exit(1)
        try:
            super().run_from_argv(argv)
        except SystemExit as exc:
            # argparse exits with 2 on bad flags; that is a usage error here
            if exc.code == 2 and not self._handled:
                sys.exit(1)
            raise

    def handle(self, *args, **options):
        self._handled = True
        name = options['subcommand']
        parser = self._subparsers[name]
        params = {
            action.dest: options.get(action.dest)
            for action in parser._actions
            if action.dest not in COMMON_DESTS + ('help',)
        }
        if options.get('config'):
            self.apply_config(parser, params, options['config'])

        try:
            rows = runners.run(name, params)
        except LookupFFNError as exc:
            raise CommandError(str(exc), returncode=exc.exit_status)

        self.write_rows(rows, options['output'], options['format'])
        if name == 'grad-check':
            failing = [row['parameter'] for row in rows if not row['passed']]
            if failing:
                raise CommandError(
                    'gradient check failed for {}'.format(', '.join(failing)),
                    returncode=2)

    def apply_config(self, parser, params, path):
        '''Fills flags that were not given on the command line from `path`.'''
        if not os.path.isfile(path):
            raise CommandError('config file {} does not exist'.format(path))
        actions = {action.dest: action for action in parser._actions}
        for key, raw in dotenv_values(path).items():
            dest = key.strip().lower().replace('-', '_')
            action = actions.get(dest)
            if action is None or dest in COMMON_DESTS:
                raise CommandError('unknown config key {!r}'.format(key))
            if params.get(dest) is not None or raw is None:
                continue
            if isinstance(action, argparse._StoreTrueAction):
                params[dest] = raw.strip().lower() in ('1', 'true', 'yes')
                continue
            try:
                value = action.type(raw) if action.type else raw
            except ValueError:
                raise CommandError('invalid value {!r} for {}'.format(raw, key))
            if action.choices and value not in action.choices:
                raise CommandError('invalid choice {!r} for {}'.format(raw, key))
            params[dest] = value

    def write_rows(self, rows, output, fmt):
        if fmt == 'json':
            text = json.dumps(rows, indent=2, default=str) + '\n'
        else:
            fieldnames = list(dict.fromkeys(key for row in rows for key in row))
            buffer = io.StringIO()
            writer = csv.DictWriter(
                buffer, fieldnames=fieldnames, restval='', lineterminator='\n')
            writer.writeheader()
            writer.writerows(rows)
            text = buffer.getvalue()
        if output == '-':
            self.stdout.write(text, ending='')
            return
        directory = os.path.dirname(output)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(output, 'w', newline='') as fh:
            fh.write(text)
        logger.info('wrote %d rows to %s', len(rows), output)
