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

----

Stage orchestration: load -> estimate -> adjust -> ensemble -> eval.

Every stage writes its artifacts into the output directory (or to the
explicit paths it is given), so the sub-commands can run one stage at a
time on the files of the previous one. Each artifact records the tool
version and a digest of the inputs of the stage that produced it.
"""

import contextlib
import json
import logging
import os
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.special import softmax

from . import __version__
from .adjust import AdjustmentSpec, Branch, adjust_logits, fit_tau
from .cache import PriorCache, estimate_key
from .config import DEFAULT_TAU, TAU_FIT, PipelineConfig, stable_digest
from .core import (BACKGROUND_ID, Dataset, DatasetError, IncompatibleReportsError, PriorDistribution,
                   RelbiasError, StageError, ValidationError, filter_nonbackground)
from .ensemble import EnsembleOutput, ensemble_branches, single_branch
from .metrics import CLASS_SPLITS, SAMPLE_SPLITS, MetricReport, Predictions, split_report
from .priors import (SolverTrace, TargetMode, clamp_prior, count_prior, estimate_prior, target_prior,
                     uniform_prior)
from .tables import (VALUES_LOGITS, VALUES_PROBS, LogitTable, dataset_digest, file_digest, load_dataset,
                     read_logit_table, read_manifest, read_prior, write_logit_table, write_prior)

_log = logging.getLogger(__name__)

TOOL = f'relbias/{__version__}'

PI_SG = 'pi_sg.json'
PI_PT = 'pi_pt.json'
PI_PT_TRACE = 'pi_pt.trace.json'
ADJUSTED_ZS = 'adjusted_zs.tsv'
ADJUSTED_SG = 'adjusted_sg.tsv'
ENSEMBLE = 'ensemble.tsv'
REPORT = 'report.json'
DISTRIBUTION = 'distribution.tsv'
ARTIFACTS = (PI_SG, PI_PT, PI_PT_TRACE, ADJUSTED_ZS, ADJUSTED_SG, ENSEMBLE, REPORT, DISTRIBUTION)

BRANCHES = ('sg', 'sg_adjusted', 'zs_initial', 'zs_debiased', 'ens_initial', 'ens_debiased')
GAIN_BASELINE = 'sg_adjusted'


@contextlib.contextmanager
def stage(name: str, path: Optional[str] = None) -> Iterator[None]:
    """ Re-raise domain errors of a stage as StageError naming the stage and input. """
    _log.info(f'{name} stage started')
    try:
        yield
    except StageError:
        raise
    except RelbiasError as err:
        _log.error(f'{name} stage failed ({path}): {err}')
        raise StageError(name, path, err) from err
    _log.info(f'{name} stage done')


def _write_json(path: str, doc: dict) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(doc, indent=1) + '\n')


def _finite(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


class Pipeline:
    """ One run over a manifest, holding the results of the stages done so far.

    `paths` maps artifact names (PI_PT, ADJUSTED_ZS, ...) to explicit
    file locations; anything not mapped lives in the output directory.
    """

    def __init__(self, cfg: PipelineConfig, cache_dir: Optional[str] = None,
                 paths: Optional[Mapping[str, str]] = None):
        with stage('load', cfg.manifest):
            self.cfg = cfg.validate()
        self.out_dir = self.cfg.out_dir
        self.paths = {name: path for name, path in (paths or {}).items() if path}
        unknown = set(self.paths) - set(ARTIFACTS)
        if unknown:
            raise ValidationError(f"unknown artifacts {sorted(unknown)}")
        self.cache = PriorCache(cache_dir or os.path.join(self.out_dir, 'cache'))

        self.ds: Optional[Dataset] = None
        self.dataset_hash: Optional[str] = None
        self.pi_sg: Optional[PriorDistribution] = None
        self.pi_pt: Optional[PriorDistribution] = None
        self.trace: Optional[SolverTrace] = None
        self.estimate_hash: Optional[str] = None
        self.target: Optional[PriorDistribution] = None
        self.adjust_hash: Optional[str] = None
        self.zs_adjusted: Optional[np.ndarray] = None
        self.sg_adjusted: Optional[np.ndarray] = None
        self.recorded_tau: Dict[str, float] = {}
        self.tau: Dict[str, float] = {}
        self.ensemble_hash: Optional[str] = None
        self.output: Optional[EnsembleOutput] = None
        self.report: Optional[dict] = None

    def artifact(self, name: str) -> str:
        if name in self.paths:
            return self.paths[name]
        if name == PI_PT_TRACE and PI_PT in self.paths:
            return os.path.splitext(self.paths[PI_PT])[0] + '.trace.json'
        return os.path.join(self.out_dir, name)

    def _table_meta(self, config_hash: str) -> Dict[str, str]:
        return {'tool': TOOL, 'config': config_hash, 'dataset': self.dataset_hash}

    def _json_meta(self, config_hash: str) -> Dict[str, str]:
        return {'tool_version': TOOL, 'config_hash': config_hash}

    def _write_path(self, name: str) -> str:
        path = self.artifact(name)
        folder = os.path.dirname(path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        return path

    # ------------------------------------------------------------------
    # load

    def load(self) -> Dataset:
        manifest = self.cfg.manifest
        with stage('load', manifest):
            self.ds = load_dataset(manifest)
            self.dataset_hash = dataset_digest(manifest)
        os.makedirs(self.out_dir, exist_ok=True)
        return self.ds

    # ------------------------------------------------------------------
    # estimate

    def estimate(self, prior_sg: Optional[str] = None) -> PriorDistribution:
        """ Estimate pi_pt, reusing a cached estimate for the same inputs.

        pi_sg is counted from the non-background labels unless a prior
        file is given.
        """
        manifest = self.cfg.manifest
        with stage('estimate', prior_sg or manifest):
            nonbg = filter_nonbackground(self.ds)
            if prior_sg:
                self.pi_sg = clamp_prior(read_prior(prior_sg, k=self.ds.k))
            else:
                self.pi_sg = count_prior(nonbg)
            zs_hash = file_digest([read_manifest(manifest)['zs_logits']])
            self.estimate_hash = estimate_key(zs_hash, self.pi_sg, self.cfg.solver)
            cached = self.cache.load(self.estimate_hash)
            if cached is None:
                self.pi_pt, self.trace = estimate_prior(nonbg, self.pi_sg, self.cfg.solver)
                self.cache.store(self.estimate_hash, self.pi_pt, self.trace)
            else:
                self.pi_pt, self.trace = cached

            if not prior_sg:
                write_prior(self._write_path(PI_SG), self.pi_sg,
                            self._json_meta(stable_digest({'dataset': self.dataset_hash})))
            write_prior(self._write_path(PI_PT), self.pi_pt, self._json_meta(self.estimate_hash))
            trace = dict(self.trace.to_dict(), loss_history=list(self.trace.loss_history))
            _write_json(self._write_path(PI_PT_TRACE), dict(trace, **self._json_meta(self.estimate_hash)))
            self._write_distribution()
        return self.pi_pt

    def _write_distribution(self) -> None:
        """ Both priors per class, most frequent training class first. """
        order = np.argsort(-self.pi_sg.probs, kind='stable')
        with open(self._write_path(DISTRIBUTION), 'w', encoding='utf-8', newline='\n') as f:
            meta = self._table_meta(self.estimate_hash)
            f.write('#' + '\t'.join(f'{key}={val}' for key, val in meta.items()) + '\n')
            f.write('class\tname\tpi_sg\tpi_pt\n')
            for c in order:
                rel = int(c) + 1
                f.write(f'{rel}\t{self.ds.space.name(rel)}\t{float(self.pi_sg.probs[c])!r}\t'
                        f'{float(self.pi_pt.probs[c])!r}\n')

    def load_priors(self) -> None:
        """ Pick up whichever of pi_sg / pi_pt an earlier estimate run left behind. """
        for name in (PI_SG, PI_PT):
            path = self.artifact(name)
            if not os.path.isfile(path):
                continue
            with stage('adjust', path):
                prior = read_prior(path, k=self.ds.k)
            if name == PI_SG:
                self.pi_sg = prior
            else:
                self.pi_pt = prior
                with open(path, encoding='utf-8') as f:
                    self.estimate_hash = json.load(f).get('config_hash', '')

    # ------------------------------------------------------------------
    # adjust

    def _target(self) -> PriorDistribution:
        mode, arg = self.cfg.target_mode()
        if mode == TargetMode.TRAINING:
            if self.pi_sg is None:
                raise DatasetError(f"training target needs pi_sg: missing file {self.artifact(PI_SG)}")
            return target_prior(self.ds.space, mode, self.pi_sg)
        return target_prior(self.ds.space, mode, arg)

    def _train_prior(self, branch: Branch) -> PriorDistribution:
        prior, name = (self.pi_pt, PI_PT) if branch == Branch.ZS else (self.pi_sg, PI_SG)
        if prior is None:
            raise DatasetError(f"no {branch.value} training prior: missing file {self.artifact(name)}")
        return prior

    def adjust(self, branch: Union[Branch, str, None] = None, prior_train: Optional[str] = None,
               tau: Optional[float] = None) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        """ Move the zs branch from pi_pt and the sg branch from pi_sg to the target.

        With `branch` only that branch is adjusted; `prior_train` then
        replaces its training prior. `tau` is recorded in the adjusted
        tables for the ensemble stage.
        """
        mode, arg = self.cfg.target_mode()
        branches = (Branch.ZS, Branch.SG) if branch is None else (Branch(branch),)
        with stage('adjust', prior_train or arg or self.cfg.manifest):
            if prior_train:
                if len(branches) != 1:
                    raise ValidationError("a training prior file needs a single branch")
                prior = clamp_prior(read_prior(prior_train, k=self.ds.k))
                if branches[0] == Branch.ZS:
                    self.pi_pt = prior
                else:
                    self.pi_sg = prior
            self.target = self._target()
            train = {b: self._train_prior(b) for b in branches}
            spec = {b: AdjustmentSpec(train[b], self.target, DEFAULT_TAU if tau is None else tau)
                    for b in branches}
            self.adjust_hash = stable_digest({'estimate': self.estimate_hash,
                                              'train': {b.value: [float(p) for p in train[b].probs]
                                                        for b in branches},
                                              'target': [float(p) for p in self.target.probs]})
            meta = self._table_meta(self.adjust_hash)
            if tau is not None:
                meta['tau'] = repr(float(tau))
            if Branch.ZS in spec:
                self.zs_adjusted = adjust_logits(self.ds.zs_logits, spec[Branch.ZS])
                write_logit_table(self._write_path(ADJUSTED_ZS),
                                  LogitTable.from_dataset(self.ds, self.zs_adjusted, False, meta=meta))
            if Branch.SG in spec:
                self.sg_adjusted = adjust_logits(self.ds.sg_logits[:, 1:], spec[Branch.SG])
                write_logit_table(self._write_path(ADJUSTED_SG),
                                  LogitTable.from_dataset(self.ds, self.sg_adjusted, False, meta=meta))
            if tau is not None:
                self.recorded_tau.update({b.value: float(tau) for b in branches})
        _log.info(f"adjusted {', '.join(b.value for b in branches)} towards the {mode.value} target")
        return self.zs_adjusted, self.sg_adjusted

    def _sg_full(self, relations: np.ndarray) -> np.ndarray:
        """ Adjusted relation columns behind the raw background column. """
        return np.concatenate([self.ds.sg_logits[:, :1], relations], axis=1)

    def load_adjusted(self) -> None:
        """ Pick up the adjusted tables of earlier adjust runs. """
        zs_path, sg_path = self.artifact(ADJUSTED_ZS), self.artifact(ADJUSTED_SG)
        loaded = {}
        for branch, path in ((Branch.ZS, zs_path), (Branch.SG, sg_path)):
            with stage('ensemble', path):
                table = read_logit_table(path)
                if table.sample_ids != self.ds.sample_ids:
                    raise DatasetError(f"{path}: samples differ from {self.cfg.manifest}")
                if table.k != self.ds.k:
                    raise DatasetError(f"dimension mismatch: {path} has k={table.k}, dataset has k={self.ds.k}")
                if table.background or table.kind != VALUES_LOGITS:
                    raise DatasetError(f"{path}: expected a background=0 table of adjusted logits")
                if 'tau' in table.meta:
                    self.recorded_tau[branch.value] = float(table.meta['tau'])
            loaded[branch] = table
        self.zs_adjusted = loaded[Branch.ZS].values
        self.sg_adjusted = loaded[Branch.SG].values
        self.adjust_hash = stable_digest({'zs': loaded[Branch.ZS].meta.get('config', ''),
                                          'sg': loaded[Branch.SG].meta.get('config', '')})

    # ------------------------------------------------------------------
    # ensemble

    def _resolve_tau(self) -> Dict[str, float]:
        adjusted = self.ds.with_logits(zs_logits=self.zs_adjusted, sg_logits=self._sg_full(self.sg_adjusted))
        nonbg = None
        identity = AdjustmentSpec(uniform_prior(self.ds.k), uniform_prior(self.ds.k))
        tau = {}
        for branch, setting in ((Branch.ZS, self.cfg.tau_zs), (Branch.SG, self.cfg.tau_sg)):
            if setting is None:
                tau[branch.value] = self.recorded_tau.get(branch.value, DEFAULT_TAU)
            elif setting == TAU_FIT:
                if nonbg is None:
                    nonbg = filter_nonbackground(adjusted)
                tau[branch.value] = fit_tau(nonbg, branch, identity)
            else:
                tau[branch.value] = float(setting)
        return tau

    def ensemble(self) -> EnsembleOutput:
        """ Fuse the adjusted branches; the background always comes from the raw sg logits. """
        with stage('ensemble', self.artifact(ADJUSTED_ZS)):
            self.tau = self._resolve_tau()
            self.output = ensemble_branches(self.zs_adjusted, self.sg_adjusted, self.ds.sg_logits,
                                            self.tau['zs'], self.tau['sg'], self.cfg.scale)
            self.ensemble_hash = stable_digest({'adjust': self.adjust_hash, 'tau': self.tau,
                                                'scale': self.cfg.scale})
            write_logit_table(self._write_path(ENSEMBLE),
                              LogitTable.from_dataset(self.ds, self.output.full(), True, VALUES_PROBS,
                                                      self._table_meta(self.ensemble_hash)))
        return self.output

    # ------------------------------------------------------------------
    # eval

    def _splits(self) -> Tuple[str, ...]:
        splits = list(self.cfg.splits)
        if self.ds.gt_triplet_inventory is None and any(s in splits for s in SAMPLE_SPLITS[1:]):
            _log.warning('no training triplet inventory; seen/unseen splits skipped')
            splits = [s for s in splits if s not in SAMPLE_SPLITS[1:]]
        if self.cfg.frequency_buckets() is None:
            splits = [s for s in splits if s not in CLASS_SPLITS]
        return tuple(splits)

    def _evaluate(self, preds: Predictions) -> MetricReport:
        nonbg = self.ds.gt_label[self.ds.gt_label != BACKGROUND_ID]
        report = split_report(preds, self.ds, freq_buckets=self.cfg.frequency_buckets(),
                              cutoffs=self.cfg.cutoffs, splits=self._splits(),
                              class_counts=np.bincount(nonbg - 1, minlength=self.ds.k),
                              graph_constraint=self.cfg.graph_constraint)
        report.validate()
        return report

    def read_predictions(self, path: str) -> Predictions:
        """ Scores of a prediction table, checked against the loaded dataset. """
        table = read_logit_table(path)
        if table.k != self.ds.k:
            raise DatasetError(f"dimension mismatch: {path} has k={table.k}, dataset has k={self.ds.k}")
        recorded = table.meta.get('dataset')
        if self.cfg.hash_check and recorded != self.dataset_hash:
            raise DatasetError(f"{path} was made from dataset {recorded}, manifest has {self.dataset_hash} "
                               f"(use --no-hash-check to override)")
        if set(table.sample_ids) != set(self.ds.sample_ids):
            raise DatasetError(f"{path}: sample ids differ from {self.cfg.manifest}")
        rows = {sid: i for i, sid in enumerate(table.sample_ids)}
        values = table.values[[rows[sid] for sid in self.ds.sample_ids]]
        if table.kind != VALUES_PROBS:
            values = softmax(values, axis=1)
        scores = values[:, 1:] if table.background else values
        return Predictions(self.ds.sample_ids, self.ds.image_ids, scores)

    def _branch_outputs(self) -> Dict[str, EnsembleOutput]:
        sg_raw = self.ds.sg_logits
        tau_zs, tau_sg = self.tau['zs'], self.tau['sg']
        return {
            'sg': single_branch(sg_raw[:, 1:], sg_raw, tau_sg),
            'sg_adjusted': single_branch(self.sg_adjusted, sg_raw, tau_sg),
            'zs_initial': single_branch(self.ds.zs_logits, sg_raw, tau_zs),
            'zs_debiased': single_branch(self.zs_adjusted, sg_raw, tau_zs),
            'ens_initial': ensemble_branches(self.ds.zs_logits, self.sg_adjusted, sg_raw,
                                             tau_zs, tau_sg, self.cfg.scale),
            'ens_debiased': self.output,
        }

    def evaluate(self, predictions: Optional[str] = None) -> dict:
        """ Score a prediction table (the ensemble output by default) and write report.json.

        When the adjusted branches are at hand, every branch is scored as
        well, with the ensemble gain over the adjusted sg branch per split.
        """
        path = predictions or self.artifact(ENSEMBLE)
        with stage('eval', path):
            main = self._evaluate(self.read_predictions(path))
            doc = dict(self._json_meta(self.cfg.digest()))
            doc['dataset_hash'] = self.dataset_hash
            doc['predictions'] = os.path.basename(path)
            doc['settings'] = {key: val for key, val in self.cfg.to_dict().items()
                               if key not in ('manifest', 'out_dir', 'hash_check')}
            if self.tau:
                doc['tau'] = dict(self.tau)
            if self.trace is not None:
                doc['solver'] = {key: (_finite(val) if isinstance(val, float) else val)
                                 for key, val in self.trace.to_dict().items()}
            doc['metrics'] = main.to_dict()
            if self.output is not None:
                branches = {name: self._evaluate(Predictions.from_output(self.ds, out))
                            for name, out in self._branch_outputs().items()}
                doc['branches'] = {name: rep.to_dict() for name, rep in branches.items()}
                doc['ensemble_gain'] = {name: branch_gain(branches[name], branches[GAIN_BASELINE])
                                        for name in ('ens_initial', 'ens_debiased')}
            _write_json(self._write_path(REPORT), doc)
        self.report = doc
        return doc

    # ------------------------------------------------------------------

    def run(self) -> dict:
        self.load()
        self.estimate()
        self.adjust()
        self.ensemble()
        return self.evaluate()


def run_pipeline(cfg: PipelineConfig, cache_dir: Optional[str] = None) -> dict:
    """ All stages in order; returns the report document. """
    return Pipeline(cfg, cache_dir).run()


# ---------------------------------------------------------------------------
# report comparison

def _metric_values(report: MetricReport) -> Dict[str, Optional[float]]:
    values = {}
    for c, v in report.recall_at.items():
        values[f'R@{c}'] = v
    for c, v in report.mrecall_at.items():
        values[f'mR@{c}'] = v
    values['acc'] = report.acc
    values['macc'] = report.macc
    return values


def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None:
        return None
    return b - a


def branch_gain(report: MetricReport, baseline: MetricReport) -> Dict[str, Optional[Dict[str, Optional[float]]]]:
    """ Per split, metric(report) - metric(baseline); None where a split is empty. """
    gains = {}
    for name, sub in (report.splits or {'all': report}).items():
        base = (baseline.splits or {'all': baseline}).get(name)
        if sub is None or base is None:
            gains[name] = None
            continue
        a, b = _metric_values(base), _metric_values(sub)
        gains[name] = {key: _delta(a[key], b[key]) for key in b}
    return gains


def _as_report(doc: dict) -> MetricReport:
    return MetricReport.from_dict(doc['metrics'] if 'metrics' in doc else doc)


def report_deltas(a: MetricReport, b: MetricReport) -> List[Tuple[str, str, Optional[float], Optional[float],
                                                                 Optional[float]]]:
    """ (split, metric, a, b, b - a) rows in percent, deltas rounded to one decimal. """
    if sorted(a.recall_at) != sorted(b.recall_at):
        raise IncompatibleReportsError(f"incompatible cutoffs: {sorted(a.recall_at)} vs {sorted(b.recall_at)}")
    a_splits = a.splits or {'all': a}
    b_splits = b.splits or {'all': b}
    if list(a_splits) != list(b_splits):
        raise IncompatibleReportsError(f"incompatible splits: {list(a_splits)} vs {list(b_splits)}")

    rows = []
    for name in a_splits:
        sub_a, sub_b = a_splits[name], b_splits[name]
        values_a = _metric_values(sub_a) if sub_a is not None else {}
        values_b = _metric_values(sub_b) if sub_b is not None else {}
        for metric in _metric_values(sub_a or sub_b or a):
            va, vb = values_a.get(metric), values_b.get(metric)
            pa = None if va is None else 100.0 * va
            pb = None if vb is None else 100.0 * vb
            delta = _delta(pa, pb)
            if delta is not None:
                delta = round(delta, 1) + 0.0
            rows.append((name, metric, pa, pb, delta))
    return rows


def format_delta(delta: Optional[float]) -> str:
    if delta is None:
        return 'n/a'
    if delta == 0:
        return '0.0'
    return f'{delta:+.1f}'


def diff_reports(a_path: str, b_path: str) -> str:
    """ Text table of the metric changes from report a to report b. """
    docs = []
    for path in (a_path, b_path):
        try:
            with open(path, encoding='utf-8') as f:
                docs.append(json.load(f))
        except OSError:
            raise DatasetError(f"missing file {path}") from None
        except json.JSONDecodeError as err:
            raise DatasetError(f"{path}: invalid JSON: {err}") from None
    try:
        a, b = (_as_report(doc) for doc in docs)
    except (KeyError, TypeError, ValueError) as err:
        raise ValidationError(f"not a metric report: {err}") from None

    def pct(v: Optional[float]) -> str:
        return 'n/a' if v is None else f'{v:.1f}'

    lines = [f'{"split":<10}{"metric":<10}{"a":>8}{"b":>8}{"delta":>8}']
    for split, metric, pa, pb, delta in report_deltas(a, b):
        lines.append(f'{split:<10}{metric:<10}{pct(pa):>8}{pct(pb):>8}{format_delta(delta):>8}')
    return '\n'.join(lines) + '\n'
