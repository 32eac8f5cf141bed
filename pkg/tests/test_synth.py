import os

import numpy as np
import pytest
from scipy.special import log_softmax

from relbias.core import PriorDistribution, PriorSource, ValidationError
from relbias.priors import clamp_probs, uniform_prior
from relbias.synth import (BACKGROUND_RATE, UNDERREP_ID_OFFSET, Regime, SynthModel, bayes_logits,
                           bayes_posterior, draw, generate, train_triplets, write_world)
from relbias.tables import load_dataset

from .conftest import zipf_world


class TestModel:

    def test_deterministic(self):
        a = draw(zipf_world(k=6, seed=3), 500, Regime.SGG)
        b = draw(zipf_world(k=6, seed=3), 500, Regime.SGG)
        assert a.dataset == b.dataset
        np.testing.assert_array_equal(a.features, b.features)

    def test_regimes_differ(self):
        model = zipf_world(k=6)
        assert generate(model, 200, Regime.SGG) != generate(model, 200, Regime.TARGET)

    def test_invalid_regime(self):
        with pytest.raises(ValidationError, match='invalid regime'):
            zipf_world(k=4).prior('holdout')

    def test_prior_length_checked(self):
        with pytest.raises(ValidationError):
            SynthModel(3, uniform_prior(3), uniform_prior(4), uniform_prior(3))

    @pytest.mark.parametrize('kwargs', [{'separation': 0.0}, {'underrep_fraction': 1.0}, {'noise_sg': -1.0},
                                        {'dim': 0}, {'seed': -2}])
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            zipf_world(k=4, **kwargs)


class TestBayesOracle:

    def test_posterior_sums_to_one(self):
        model = zipf_world(k=7)
        x = np.random.default_rng(0).normal(size=(100, model.dim))
        np.testing.assert_allclose(bayes_posterior(model, x, model.sgg_prior).sum(axis=1), 1.0, atol=1e-12)

    def test_mode_at_class_mean(self):
        model = zipf_world(k=7)
        for r in range(model.k):
            assert int(np.argmax(bayes_logits(model, model.class_means[r], uniform_prior(model.k)))) == r

    def test_vanishing_separation_gives_prior(self):
        model = zipf_world(k=5, separation=1e-12)
        x = np.random.default_rng(1).normal(size=(50, model.dim))
        posterior = bayes_posterior(model, x, model.pretrain_prior)
        assert np.abs(posterior - clamp_probs(model.pretrain_prior.probs)).max() <= 1e-9

    def test_branch_logits(self):
        model = zipf_world(k=5)
        result = draw(model, 300, Regime.PRETRAIN)
        ds = result.dataset
        np.testing.assert_allclose(ds.zs_logits, bayes_logits(model, result.features, model.pretrain_prior),
                                   rtol=0, atol=1e-12)
        clean = ~result.underrep
        expected = log_softmax(bayes_logits(model, result.features, model.sgg_prior), axis=1)
        np.testing.assert_allclose(ds.sg_logits[clean, 1:], expected[clean], rtol=0, atol=1e-12)


class TestDraw:

    def test_label_frequencies(self):
        sgg = PriorDistribution([0.5, 0.3, 0.2], PriorSource.FILE)
        model = SynthModel(3, uniform_prior(3), sgg, uniform_prior(3), seed=2)
        result = draw(model, 20000, Regime.SGG)
        labels = result.dataset.gt_label
        assert abs(np.mean(labels == 0) - BACKGROUND_RATE) <= 0.01
        freq = np.bincount(labels[labels != 0] - 1, minlength=3) / np.sum(labels != 0)
        assert np.abs(freq - [0.5, 0.3, 0.2]).max() <= 0.02

    def test_background_logit_tracks_label(self):
        result = draw(zipf_world(k=5), 2000, Regime.SGG)
        bg_logit = result.dataset.sg_logits[:, 0]
        assert bg_logit[result.background].min() > bg_logit[~result.background].max()

    def test_identifiers(self):
        ds = generate(zipf_world(k=4), 20, Regime.SGG)
        assert ds.sample_ids[:2] == ('s0000000', 's0000001')
        assert ds.image_ids[7] == 'img000000' and ds.image_ids[8] == 'img000001'

    def test_underrepresented_are_unseen(self):
        model = zipf_world(k=10)
        result = draw(model, 5000, Regime.SGG)
        ds = result.dataset
        inventory = train_triplets(model)
        assert ds.gt_triplet_inventory == inventory
        unseen = np.array([t not in inventory for t in ds.triplets])
        nonbg = ~result.background
        np.testing.assert_array_equal(unseen[nonbg], result.underrep[nonbg])
        assert np.all(ds.subject_class[result.underrep] >= UNDERREP_ID_OFFSET)
        assert abs(result.underrep.mean() - model.underrep_fraction) <= 0.015

    def test_underrepresented_sg_is_worse(self):
        result = draw(zipf_world(k=10), 10000, Regime.SGG)
        ds = result.dataset
        correct = ds.sg_logits[:, 1:].argmax(axis=1) + 1 == ds.gt_label
        nonbg = ~result.background
        assert correct[nonbg & result.underrep].mean() < correct[nonbg & ~result.underrep].mean()


class TestWriteWorld:

    def test_files(self, tmp_path):
        model = zipf_world(k=4)
        manifest = write_world(model, 100, str(tmp_path / 'world'), meta={'tool': 'relbias-test'})
        folder = os.path.dirname(manifest)
        for name in ('manifest.json', 'zs.tsv', 'sg.tsv', 'train_triplets.tsv', 'pretrain_prior.json',
                     'sgg_prior.json', 'target_prior.json', 'underrep.tsv'):
            assert os.path.isfile(os.path.join(folder, name)), name
        assert load_dataset(manifest) == generate(model, 100, Regime.SGG)

        underrep = draw(model, 100, Regime.SGG).underrep
        with open(os.path.join(folder, 'underrep.tsv')) as f:
            lines = f.read().splitlines()
        assert lines[0] == 'sample_id'
        assert len(lines) - 1 == int(underrep.sum())
