#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" relbias - relation prior debiasing toolkit

Copyright (c) 2024 The relbias authors

----

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the GNU
General Public License for more details.
"""

import argparse
import logging
import logging.handlers
import os
import sys
from typing import Dict, List, Optional

from . import __version__
from .adjust import Branch
from .config import PipelineConfig
from .core import RelbiasError
from .pipeline import ADJUSTED_SG, ADJUSTED_ZS, ENSEMBLE, PI_PT, REPORT, Pipeline, diff_reports
from .priors import parse_prior_spec, uniform_prior
from .synth import Regime, SynthModel, write_world

# logfile stuff
_log = logging.getLogger(__name__)

LOG_NAME = 'relbias.log'


def create_logger(log_file: Optional[str], log_level=logging.WARNING, maxsize=2 * 2 ** 20, maxnb=3,
                  console: bool = True) -> None:
    """ Rotating log file (if given) plus stderr on the root logger. """
    formatter = logging.Formatter('%(levelname)s:%(name)s:%(asctime)s:%(message)s')
    root = logging.getLogger('')
    root.setLevel(log_level)
    for handler in list(root.handlers):
        if getattr(handler, '_relbias', False):
            root.removeHandler(handler)
            handler.close()

    handlers = []
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.handlers.RotatingFileHandler(log_file, mode='a', maxBytes=maxsize, backupCount=maxnb))
    if console:
        handlers.append(logging.StreamHandler(sys.stderr))
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._relbias = True
        root.addHandler(handler)
    _log.info(f'relbias {__version__} started')


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument('--seed', type=int, default=None, help='random seed (default 0)')
    common.add_argument('--out-dir', default=None, help='output directory (default ./out)')
    common.add_argument('--config', default=None, help='settings file (JSON or key = value)')
    common.add_argument('--quiet', action='store_true', help='no log output on stderr')
    common.add_argument('--verbose', action='store_true', help='log stage progress')
    return common


def _pipeline_options(parser: argparse.ArgumentParser, stages: str) -> None:
    parser.add_argument('--manifest', default=None, help='dataset manifest (JSON)')
    if 'e' in stages:
        parser.add_argument('--iters', '--max-iters', dest='max_iters', type=int, default=None)
        parser.add_argument('--lr', '--learning-rate', dest='learning_rate', type=float, default=None)
        parser.add_argument('--tol', '--grad-tol', dest='grad_tol', type=float, default=None)
        parser.add_argument('--init', choices=('uniform', 'counted'), default=None)
    if 'a' in stages:
        parser.add_argument('--prior-target', '--target', dest='target', default=None,
                            help='uniform | training | file:<path>')
    if 'n' in stages:
        parser.add_argument('--tau-zs', dest='tau_zs', default=None,
                            help="temperature or 'fit' (default: as recorded by adjust, else 1)")
        parser.add_argument('--tau-sg', dest='tau_sg', default=None,
                            help="temperature or 'fit' (default: as recorded by adjust, else 1)")
        parser.add_argument('--scale', type=float, default=None)
    if 'v' in stages:
        parser.add_argument('--cutoffs', default=None, help='comma separated, e.g. 20,50,100')
        parser.add_argument('--splits', default=None, help='comma separated subset of all,seen,unseen,'
                                                           'frequent,medium,rare')
        parser.add_argument('--buckets', default=None, help="'auto', 'none' or 'hi,lo' training counts")
        parser.add_argument('--no-graph-constraint', dest='graph_constraint', action='store_false', default=None)
        parser.add_argument('--no-hash-check', dest='hash_check', action='store_false', default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='relbias', description='Relation prior debiasing toolkit',
                                     allow_abbrev=False)
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    def command(name: str, text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=text, allow_abbrev=False)

    p = command('synth', 'write a synthetic label-shift world')
    p.add_argument('--k', type=int, default=50)
    p.add_argument('--n', type=int, default=50000)
    p.add_argument('--dim', type=int, default=8)
    p.add_argument('--pretrain-prior', default='zipf:1.0')
    p.add_argument('--sgg-prior', default='zipf:0.7')
    p.add_argument('--target-prior', default='uniform')
    p.add_argument('--sep', type=float, default=2.0)
    p.add_argument('--underrep', type=float, default=0.1)
    p.add_argument('--noise-sg', type=float, default=3.0)
    p.add_argument('--regime', choices=[r.value for r in Regime], default=Regime.SGG.value)

    p = command('estimate', 'estimate pi_pt (pi_sg counted unless given)')
    _pipeline_options(p, 'e')
    p.add_argument('--prior-sg', default=None, help='pi_sg prior file (default: counted from the labels)')
    p.add_argument('--out', default=None, help='pi_pt file (default <out-dir>/pi_pt.json)')

    p = command('adjust', 'adjust the branches to a target prior')
    _pipeline_options(p, 'a')
    p.add_argument('--branch', choices=[b.value for b in Branch], default=None, help='default: both')
    p.add_argument('--prior-train', default=None, help='training prior of --branch (default from estimate)')
    p.add_argument('--tau', type=float, default=None, help='temperature recorded for the ensemble stage')
    p.add_argument('--out', default=None, help='adjusted table of --branch')

    p = command('ensemble', 'fuse the adjusted branches')
    _pipeline_options(p, 'n')
    p.add_argument('--adjusted-zs', default=None, help='default <out-dir>/adjusted_zs.tsv')
    p.add_argument('--adjusted-sg', default=None, help='default <out-dir>/adjusted_sg.tsv')
    p.add_argument('--out', default=None, help='probability table (default <out-dir>/ensemble.tsv)')

    p = command('eval', 'score a prediction table')
    _pipeline_options(p, 'v')
    p.add_argument('--pred', '--predictions', dest='predictions', default=None,
                   help='prediction table (default <out-dir>/ensemble.tsv)')
    p.add_argument('--out', default=None, help='report file (default <out-dir>/report.json)')

    p = command('pipeline', 'estimate, adjust, ensemble and eval')
    _pipeline_options(p, 'eanv')

    p = command('diff', 'metric deltas between two reports')
    p.add_argument('report_a')
    p.add_argument('report_b')
    return parser


def check_args(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """ Combinations argparse cannot express; exits with status 2. """
    if args.command == 'adjust':
        if args.out and not args.branch:
            parser.error('adjust --out needs --branch')
        if args.prior_train and not args.branch:
            parser.error('adjust --prior-train needs --branch')
        if args.tau is not None and not args.tau > 0:
            parser.error(f'--tau must be positive, got {args.tau}')


_CONFIG_KEYS = ('manifest', 'seed', 'out_dir', 'max_iters', 'learning_rate', 'grad_tol', 'init', 'target',
                'tau_zs', 'tau_sg', 'scale', 'cutoffs', 'splits', 'buckets', 'graph_constraint', 'hash_check')

# stage options naming artifact files
_ARTIFACT_OPTIONS = {
    'estimate': {'out': PI_PT},
    'ensemble': {'adjusted_zs': ADJUSTED_ZS, 'adjusted_sg': ADJUSTED_SG, 'out': ENSEMBLE},
    'eval': {'out': REPORT},
}


def pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {key: getattr(args, key, None) for key in _CONFIG_KEYS}
    return PipelineConfig.build(args.config, **overrides)


def artifact_paths(args: argparse.Namespace) -> Dict[str, str]:
    paths = {name: getattr(args, option) for option, name in _ARTIFACT_OPTIONS.get(args.command, {}).items()}
    if args.command == 'adjust' and args.out:
        paths[ADJUSTED_ZS if args.branch == Branch.ZS.value else ADJUSTED_SG] = args.out
    return {name: path for name, path in paths.items() if path}


def _synth(args: argparse.Namespace) -> int:
    seed = 0 if args.seed is None else args.seed
    model = SynthModel(args.k,
                       parse_prior_spec(args.pretrain_prior, args.k),
                       parse_prior_spec(args.sgg_prior, args.k),
                       parse_prior_spec(args.target_prior, args.k) if args.target_prior else uniform_prior(args.k),
                       dim=args.dim, separation=args.sep, underrep_fraction=args.underrep,
                       noise_sg=args.noise_sg, seed=seed)
    manifest = write_world(model, args.n, args.out_dir or 'out', args.regime)
    print(manifest)
    return 0


def _stages(args: argparse.Namespace) -> int:
    pipe = Pipeline(pipeline_config(args), paths=artifact_paths(args))
    pipe.load()
    if args.command == 'pipeline':
        pipe.run()
    elif args.command == 'estimate':
        pipe.estimate(args.prior_sg)
    elif args.command == 'adjust':
        pipe.load_priors()
        pipe.adjust(args.branch, args.prior_train, args.tau)
    elif args.command == 'ensemble':
        pipe.load_adjusted()
        pipe.ensemble()
    elif args.command == 'eval':
        pipe.evaluate(args.predictions)
    return 0


def run(args: argparse.Namespace) -> int:
    if args.command == 'synth':
        return _synth(args)
    if args.command == 'diff':
        sys.stdout.write(diff_reports(args.report_a, args.report_b))
        return 0
    return _stages(args)


def main(argv: Optional[List[str]] = None) -> int:
    """ Exit status 0 on success, 1 on any failed stage, 2 on usage errors. """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        check_args(parser, args)
    except SystemExit as err:
        return int(err.code or 0)

    log_file = os.path.join(args.out_dir, LOG_NAME) if args.out_dir else None
    log_level = logging.INFO if args.verbose else logging.WARNING
    create_logger(log_file, log_level, console=not args.quiet)
    try:
        return run(args)
    except RelbiasError as err:
        _log.error(str(err))
        return 1
    except Exception as err:
        _log.exception(str(err))
        return 1


if __name__ == "__main__":
    sys.exit(main())
