import json
import os

import numpy as np
import pytest
from scipy.special import softmax

from relbias.cache import PriorCache, estimate_key
from relbias.cli import main
from relbias.config import Config, PipelineConfig
from relbias.core import DatasetError, IncompatibleReportsError, StageError, ValidationError
from relbias.pipeline import (ADJUSTED_SG, ADJUSTED_ZS, ARTIFACTS, DISTRIBUTION, ENSEMBLE, PI_PT, REPORT, Pipeline,
                              diff_reports, format_delta, run_pipeline)
from relbias.priors import SolverConfig, SolverTrace, uniform_prior, zipf_prior
from relbias.tables import LogitTable, read_logit_table, write_logit_table

from .conftest import l1


def _read(path):
    with open(path, 'rb') as f:
        return f.read()


def _write_report(path, recall):
    doc = {'metrics': {'count': 10, 'recall_at': {'20': recall}, 'mrecall_at': {'20': 0.3}, 'acc': 0.5,
                       'macc': 0.4, 'per_class_acc': [0.5, 0.3], 'per_class_recall': {'20': [0.4, 0.2]}}}
    with open(path, 'w') as f:
        json.dump(doc, f)
    return str(path)


class TestPipeline:

    def test_tiny_run(self, tiny_manifest, tmp_path):
        cfg = PipelineConfig.build(manifest=tiny_manifest, out_dir=str(tmp_path))
        report = run_pipeline(cfg)
        for name in ARTIFACTS:
            assert os.path.isfile(tmp_path / name), name
        assert report['metrics']['count'] == 2
        assert report['metrics']['split_counts']['seen'] == 1
        assert report['metrics']['split_counts']['unseen'] == 1
        assert set(report['branches']) == {'sg', 'sg_adjusted', 'zs_initial', 'zs_debiased', 'ens_initial',
                                           'ens_debiased'}
        assert report['tool_version'].startswith('relbias/')
        with open(tmp_path / REPORT) as f:
            assert json.load(f) == report

    def test_distribution_table(self, small_world, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        pipe.load()
        pipe.estimate()
        with open(tmp_path / DISTRIBUTION) as f:
            lines = f.read().splitlines()
        assert lines[0].startswith('#tool=relbias') and f'config={pipe.estimate_hash}' in lines[0]
        assert lines[1] == 'class\tname\tpi_sg\tpi_pt'
        assert len(lines) == 7
        counted = [float(line.split('\t')[2]) for line in lines[2:]]
        assert counted == sorted(counted, reverse=True)

    def test_empty_dataset_fails_in_estimate(self, empty_manifest, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=empty_manifest, out_dir=str(tmp_path)))
        with pytest.raises(StageError) as err:
            pipe.run()
        assert err.value.stage == 'estimate'

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StageError) as err:
            Pipeline(PipelineConfig.build(manifest=str(tmp_path / 'none.json'), out_dir=str(tmp_path)))
        assert err.value.stage == 'load'
        assert 'missing file' in str(err.value)

    def test_deterministic(self, small_world, tmp_path):
        for name in ('a', 'b'):
            run_pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path / name), tau_zs='fit'))
        for name in ARTIFACTS:
            assert _read(tmp_path / 'a' / name) == _read(tmp_path / 'b' / name), name

    def test_target_change_reuses_estimate(self, small_world, tmp_path, monkeypatch):
        run_pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        first = _read(tmp_path / PI_PT)

        def fail(*args, **kwargs):
            raise AssertionError('estimate_prior called despite cached estimate')

        monkeypatch.setattr('relbias.pipeline.estimate_prior', fail)
        report = run_pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path), target='training'))
        assert _read(tmp_path / PI_PT) == first
        assert report['settings']['target'] == 'training'

    def test_hash_check(self, tiny_manifest, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=tiny_manifest, out_dir=str(tmp_path)))
        pipe.run()
        path = tmp_path / ENSEMBLE
        path.write_text(path.read_text().replace(f'dataset={pipe.dataset_hash}', 'dataset=0000000000000000'))
        with pytest.raises(StageError, match='--no-hash-check') as err:
            pipe.evaluate()
        assert err.value.stage == 'eval'

        unchecked = Pipeline(PipelineConfig.build(manifest=tiny_manifest, out_dir=str(tmp_path), hash_check=False))
        unchecked.load()
        assert unchecked.evaluate()['metrics']['count'] == 2

    def test_foreign_predictions(self, tiny_manifest, small_world, tmp_path):
        run_pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path / 'small')))
        pipe = Pipeline(PipelineConfig.build(manifest=tiny_manifest, out_dir=str(tmp_path / 'tiny'),
                                             hash_check=False))
        pipe.load()
        with pytest.raises(StageError, match='dimension mismatch'):
            pipe.evaluate(str(tmp_path / 'small' / ENSEMBLE))

    def test_adjusted_tables_have_no_background(self, small_world, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        pipe.run()
        for name, values in ((ADJUSTED_ZS, pipe.zs_adjusted), (ADJUSTED_SG, pipe.sg_adjusted)):
            table = read_logit_table(str(tmp_path / name))
            assert not table.background, name
            assert table.values.shape == (len(pipe.ds), pipe.ds.k)
            np.testing.assert_array_equal(table.values, values)
        np.testing.assert_allclose(pipe.output.p_background, softmax(pipe.ds.sg_logits, axis=1)[:, 0],
                                   rtol=0, atol=1e-12)

    def test_background_table_rejected_as_adjusted(self, small_world, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        pipe.run()
        write_logit_table(str(tmp_path / ADJUSTED_SG),
                          LogitTable.from_dataset(pipe.ds, pipe.ds.sg_logits, True))
        again = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        again.load()
        with pytest.raises(StageError, match='background=0') as err:
            again.load_adjusted()
        assert err.value.stage == 'ensemble'

    def test_single_branch_with_recorded_tau(self, small_world, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        pipe.load()
        pipe.estimate()
        pipe.adjust('zs', tau=2.0)
        assert pipe.sg_adjusted is None
        assert not os.path.exists(tmp_path / ADJUSTED_SG)
        pipe.adjust('sg')

        ens = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        ens.load()
        ens.load_adjusted()
        ens.ensemble()
        assert ens.tau == {'zs': 2.0, 'sg': 1.0}

        fixed = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path), tau_zs=0.5))
        fixed.load()
        fixed.load_adjusted()
        fixed.ensemble()
        assert fixed.tau == {'zs': 0.5, 'sg': 1.0}

    def test_training_prior_file_needs_one_branch(self, small_world, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        pipe.load()
        with pytest.raises(StageError, match='single branch'):
            pipe.adjust(prior_train=os.path.join(os.path.dirname(small_world), 'sgg_prior.json'))

    def test_missing_training_prior(self, small_world, tmp_path):
        pipe = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)))
        pipe.load()
        pipe.load_priors()
        with pytest.raises(StageError, match='missing file') as err:
            pipe.adjust('zs')
        assert err.value.stage == 'adjust'

    def test_explicit_paths(self, small_world, tmp_path):
        paths = {PI_PT: str(tmp_path / 'priors' / 'pt.json'), ENSEMBLE: str(tmp_path / 'ens.tsv')}
        pipe = Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path / 'out')), paths=paths)
        pipe.run()
        assert os.path.isfile(tmp_path / 'priors' / 'pt.json')
        assert os.path.isfile(tmp_path / 'priors' / 'pt.trace.json')
        assert os.path.isfile(tmp_path / 'ens.tsv')
        assert not os.path.exists(tmp_path / 'out' / PI_PT)
        assert not os.path.exists(tmp_path / 'out' / ENSEMBLE)
        with pytest.raises(ValidationError, match='unknown artifacts'):
            Pipeline(PipelineConfig.build(manifest=small_world, out_dir=str(tmp_path)), paths={'weights.bin': 'x'})


class TestDiff:

    def test_same_report(self, tiny_manifest, tmp_path):
        run_pipeline(PipelineConfig.build(manifest=tiny_manifest, out_dir=str(tmp_path)))
        text = diff_reports(str(tmp_path / REPORT), str(tmp_path / REPORT))
        deltas = [line.split()[-1] for line in text.splitlines()[1:]]
        assert deltas
        assert set(deltas) <= {'0.0', 'n/a'}
        assert '0.0' in deltas

    def test_delta(self, tmp_path):
        text = diff_reports(_write_report(tmp_path / 'a.json', 0.445), _write_report(tmp_path / 'b.json', 0.465))
        row = [line for line in text.splitlines() if 'R@20' in line and 'mR@20' not in line][0]
        assert row.split() == ['all', 'R@20', '44.5', '46.5', '+2.0']

    def test_incompatible_cutoffs(self, tmp_path):
        a = _write_report(tmp_path / 'a.json', 0.4)
        with open(a) as f:
            doc = json.load(f)
        for key in ('recall_at', 'mrecall_at', 'per_class_recall'):
            doc['metrics'][key] = {'50': doc['metrics'][key]['20']}
        with open(tmp_path / 'b.json', 'w') as f:
            json.dump(doc, f)
        with pytest.raises(IncompatibleReportsError, match='incompatible cutoffs'):
            diff_reports(a, str(tmp_path / 'b.json'))

    def test_not_a_report(self, tmp_path):
        (tmp_path / 'x.json').write_text('{"metrics": {}}')
        with pytest.raises(ValidationError):
            diff_reports(str(tmp_path / 'x.json'), str(tmp_path / 'x.json'))

    def test_format_delta(self):
        assert format_delta(-0.0) == '0.0'
        assert format_delta(-1.25) == '-1.2'
        assert format_delta(None) == 'n/a'


class TestStandardFixture:

    def test_prior_recovery(self, standard_run):
        pipe, _ = standard_run
        assert pipe.trace.converged
        assert pipe.trace.iterations_run <= 2000
        assert l1(pipe.pi_pt.probs, zipf_prior(50, 1.0).probs) <= 0.05

    def test_ensemble_trend(self, standard_run):
        _, report = standard_run
        branches = report['branches']
        unseen = {name: branches[name]['splits']['unseen']['acc'] for name in branches}
        assert unseen['zs_debiased'] > unseen['sg']
        assert unseen['ens_debiased'] - unseen['sg'] >= 0.02

        gain = report['ensemble_gain']
        assert gain['ens_debiased']['unseen']['acc'] > gain['ens_debiased']['all']['acc']
        assert gain['ens_initial']['all']['acc'] < gain['ens_debiased']['all']['acc']

    def test_unseen_harder_for_sg(self, standard_run):
        _, report = standard_run
        sg = report['branches']['sg']['splits']
        assert sg['unseen']['acc'] < sg['all']['acc']

    def test_frequency_buckets(self, standard_run):
        _, report = standard_run
        counts = report['metrics']['split_counts']
        assert counts['frequent'] + counts['medium'] + counts['rare'] == counts['all']


class TestCli:

    def test_synth_then_pipeline(self, tmp_path, capsys):
        world = str(tmp_path / 'world')
        assert main(['synth', '--k', '5', '--n', '400', '--out-dir', world, '--quiet']) == 0
        manifest = capsys.readouterr().out.strip()
        assert manifest == os.path.join(world, 'manifest.json')

        out = str(tmp_path / 'out')
        assert main(['pipeline', '--manifest', manifest, '--out-dir', out, '--quiet', '--tau-sg', 'fit']) == 0
        with open(os.path.join(out, REPORT)) as f:
            report = json.load(f)
        assert report['settings']['tau_sg'] == 'fit'
        assert os.path.isfile(os.path.join(out, 'relbias.log'))

    def test_stages_one_by_one(self, small_world, tmp_path):
        out = str(tmp_path / 'out')
        common = ['--manifest', small_world, '--out-dir', out, '--quiet']
        assert main(['estimate'] + common) == 0
        assert main(['adjust', '--target', 'training'] + common) == 0
        assert main(['ensemble', '--scale', '0.5'] + common) == 0
        assert main(['eval', '--cutoffs', '1,5'] + common) == 0
        with open(os.path.join(out, REPORT)) as f:
            report = json.load(f)
        assert sorted(report['metrics']['recall_at']) == ['1', '5']
        assert 'branches' not in report

    def test_stage_flags(self, small_world, tmp_path):
        out = str(tmp_path / 'out')
        files = tmp_path / 'files'
        common = ['--manifest', small_world, '--out-dir', out, '--quiet']
        sgg = os.path.join(os.path.dirname(small_world), 'sgg_prior.json')
        pi_pt, zs, sg = str(files / 'pi_pt.json'), str(files / 'zs_adj.tsv'), str(files / 'sg_adj.tsv')
        ens, report = str(files / 'ens.tsv'), str(files / 'report.json')

        assert main(['estimate', '--prior-sg', sgg, '--out', pi_pt, '--lr', '0.1', '--iters', '2000',
                     '--tol', '1e-6', '--seed', '0', '--init', 'uniform'] + common) == 0
        with open(files / 'pi_pt.trace.json') as f:
            trace = json.load(f)
        assert {'iterations_run', 'final_loss', 'final_grad_norm', 'converged'} <= set(trace)

        assert main(['adjust', '--branch', 'zs', '--prior-train', pi_pt, '--prior-target', 'uniform',
                     '--tau', '1.5', '--out', zs] + common) == 0
        assert main(['adjust', '--branch', 'sg', '--prior-train', sgg, '--prior-target', 'uniform',
                     '--out', sg] + common) == 0
        for path in (zs, sg):
            table = read_logit_table(path)
            assert not table.background
            assert table.values.shape[1] == 5
        assert read_logit_table(zs).meta['tau'] == '1.5'

        assert main(['ensemble', '--adjusted-zs', zs, '--adjusted-sg', sg, '--tau-sg', '1.0', '--scale', '1.0',
                     '--out', ens] + common) == 0
        table = read_logit_table(ens)
        assert table.background and table.kind == 'probs'

        assert main(['eval', '--pred', ens, '--cutoffs', '20,50,100', '--splits', 'all,seen,unseen',
                     '--buckets', 'auto', '--out', report] + common) == 0
        with open(report) as f:
            assert sorted(json.load(f)['metrics']['recall_at'], key=int) == ['20', '50', '100']
        for name in (PI_PT, ADJUSTED_ZS, ADJUSTED_SG, ENSEMBLE, REPORT):
            assert not os.path.exists(os.path.join(out, name)), name

    @pytest.mark.parametrize('argv', [
        ['eval', '--out-d', 'elsewhere'],
        ['eval', '--predictions-file', 'ens.tsv'],
        ['adjust', '--out', 'adjusted.tsv'],
        ['adjust', '--prior-train', 'pi_pt.json'],
        ['adjust', '--branch', 'zs', '--tau', '0'],
    ])
    def test_flag_usage_errors(self, tiny_manifest, tmp_path, argv):
        assert main(argv + ['--manifest', tiny_manifest, '--quiet']) == 2

    def test_usage_error(self):
        assert main(['frobnicate']) == 2

    def test_failed_stage(self, tmp_path):
        assert main(['pipeline', '--manifest', str(tmp_path / 'none.json'), '--out-dir', str(tmp_path),
                     '--quiet']) == 1

    def test_diff(self, tmp_path, capsys):
        a = _write_report(tmp_path / 'a.json', 0.445)
        b = _write_report(tmp_path / 'b.json', 0.465)
        assert main(['diff', a, b, '--quiet']) == 0
        assert '+2.0' in capsys.readouterr().out


class TestConfig:

    def test_key_value_file(self, tmp_path):
        path = tmp_path / 'relbias.conf'
        path.write_text('# run settings\nmanifest = data/manifest.json\ntarget = training\n'
                        'max_iters = 500\ncutoffs = 20,50\ngraph_constraint = false\n')
        assert Config(str(path)).target == 'training'
        cfg = PipelineConfig.build(str(path))
        assert cfg.target == 'training'
        assert cfg.solver.max_iters == 500
        assert cfg.cutoffs == (20, 50)
        assert cfg.graph_constraint is False

    def test_json_file_and_overrides(self, tmp_path):
        path = tmp_path / 'relbias.json'
        path.write_text(json.dumps({'manifest': 'm.json', 'tau_zs': 'fit', 'seed': 3,
                                    'solver': {'grad_tol': 1e-7}, 'target': 'training'}))
        cfg = PipelineConfig.build(str(path), target='uniform', scale=None)
        assert cfg.tau_zs == 'fit'
        assert cfg.solver == SolverConfig(grad_tol=1e-7, seed=3)
        assert cfg.target == 'uniform'
        assert cfg.scale == 1.0

    def test_rejects_unknown_key(self):
        with pytest.raises(ValidationError, match='unknown config keys'):
            PipelineConfig.build(manifest='m.json', colour='blue')

    def test_needs_manifest(self):
        with pytest.raises(ValidationError):
            PipelineConfig.build()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            Config(str(tmp_path / 'absent.conf'))

    def test_digest(self):
        a = PipelineConfig.build(manifest='a/m.json', out_dir='x')
        b = PipelineConfig.build(manifest='b/m.json', out_dir='y', hash_check=False)
        assert a.digest() == b.digest()
        assert a.digest() != PipelineConfig.build(manifest='a/m.json', target='training').digest()

    def test_validate(self, tiny_manifest):
        cfg = PipelineConfig.build(manifest=tiny_manifest, cutoffs='100,20,20').validate()
        assert cfg.cutoffs == (20, 100)
        with pytest.raises(ValidationError):
            PipelineConfig.build(manifest=tiny_manifest, scale=-1.0).validate()
        with pytest.raises(DatasetError, match='missing file'):
            PipelineConfig.build(manifest=tiny_manifest, target='file:/nonexistent/prior.json').validate()


class TestCache:

    def test_store_and_load(self, tmp_path):
        cache = PriorCache(str(tmp_path))
        trace = SolverTrace(3, [1.0, 0.5, 0.4, 0.39], 1e-7, True)
        cache.store('abc', uniform_prior(3), trace)
        prior, loaded = cache.load('abc')
        assert prior == uniform_prior(3)
        assert loaded.loss_history == trace.loss_history
        assert cache.load('missing') is None

    def test_corrupt_entry_is_dropped(self, tmp_path):
        cache = PriorCache(str(tmp_path))
        with open(cache.path('abc'), 'wb') as f:
            f.write(b'not a pickle')
        assert cache.load('abc') is None
        assert not os.path.exists(cache.path('abc'))

    def test_key(self):
        prior = uniform_prior(3)
        assert estimate_key('zs1', prior, SolverConfig()) == estimate_key('zs1', prior, SolverConfig())
        assert estimate_key('zs1', prior, SolverConfig()) != estimate_key('zs2', prior, SolverConfig())
        assert estimate_key('zs1', prior, SolverConfig()) != estimate_key('zs1', prior, SolverConfig(max_iters=5))
