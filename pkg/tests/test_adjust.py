import numpy as np
import pytest
from scipy.special import softmax

from relbias.adjust import (DEFAULT_TAU_GRID, AdjustmentSpec, Branch, adjust_logits, branch_logits,
                            calibrated_probs, fit_tau)
from relbias.core import Dataset, PriorDistribution, PriorSource, RelationLabelSpace, ValidationError, \
    filter_nonbackground
from relbias.priors import uniform_prior
from relbias.synth import Regime, bayes_logits, bayes_posterior, draw, generate

from .conftest import zipf_world


def _prior(probs):
    return PriorDistribution(probs, PriorSource.FILE)


def _nearest(grid, value):
    grid = np.asarray(grid)
    return float(grid[np.argmin(np.abs(np.log(grid / value)))])


class TestAdjustLogits:

    def test_hand_example(self):
        spec = AdjustmentSpec(_prior([0.9, 0.1]), uniform_prior(2))
        np.testing.assert_allclose(adjust_logits(np.zeros(2), spec), [-0.587787, 1.609438], atol=1e-6)

    def test_shift_passes_through(self):
        spec = AdjustmentSpec(_prior([0.9, 0.1]), uniform_prior(2))
        np.testing.assert_allclose(adjust_logits(np.full(2, 5.0), spec), [4.412213, 6.609438], atol=1e-6)

    def test_uniform_to_uniform_is_identity(self):
        logits = np.array([[0.3, -1.2, 4.0]])
        spec = AdjustmentSpec(uniform_prior(3), uniform_prior(3))
        np.testing.assert_array_equal(adjust_logits(logits, spec), logits)

    def test_no_op_on_many_samples(self):
        model = zipf_world(k=20)
        ds = generate(model, 10000, Regime.TARGET)
        spec = AdjustmentSpec(model.pretrain_prior, model.pretrain_prior)
        adjusted = adjust_logits(ds.zs_logits, spec)
        assert np.abs(adjusted - ds.zs_logits).max() <= 1e-12
        assert int((adjusted.argmax(axis=1) != ds.zs_logits.argmax(axis=1)).sum()) == 0

    def test_composition(self):
        rng = np.random.default_rng(4)
        a, b, c = (_prior(rng.dirichlet(np.ones(6))) for _ in range(3))
        logits = rng.normal(size=(50, 6))
        twice = adjust_logits(adjust_logits(logits, AdjustmentSpec(a, b)), AdjustmentSpec(b, c))
        once = adjust_logits(logits, AdjustmentSpec(a, c))
        np.testing.assert_allclose(twice, once, rtol=0, atol=1e-12)

    def test_probabilities_ignore_row_offsets(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(20, 4))
        spec = AdjustmentSpec(_prior([0.4, 0.3, 0.2, 0.1]), uniform_prior(4))
        shifted = adjust_logits(logits + rng.normal(scale=50.0, size=(20, 1)), spec)
        np.testing.assert_allclose(calibrated_probs(shifted), calibrated_probs(adjust_logits(logits, spec)),
                                   rtol=0, atol=1e-12)

    def test_rejects_width(self):
        with pytest.raises(ValidationError):
            adjust_logits(np.zeros(3), AdjustmentSpec(uniform_prior(2), uniform_prior(2)))

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            AdjustmentSpec(uniform_prior(2), uniform_prior(3))
        with pytest.raises(ValidationError):
            AdjustmentSpec(uniform_prior(2), uniform_prior(2), tau=0.0)


class TestBayesOptimality:

    @pytest.mark.parametrize('kwargs', [{}, {'k': 10, 'pretrain': 1.5, 'separation': 3.0}],
                             ids=['zipf1-k50', 'zipf1.5-k10'])
    def test_adjusted_argmax_is_target_bayes(self, kwargs):
        model = zipf_world(**kwargs)
        result = draw(model, 10000, Regime.TARGET)
        ds = result.dataset
        adjusted = adjust_logits(ds.zs_logits, AdjustmentSpec(model.pretrain_prior, model.target_prior))
        oracle = bayes_logits(model, result.features, model.target_prior).argmax(axis=1)
        assert np.mean(adjusted.argmax(axis=1) == oracle) >= 0.999

        nonbg = ds.gt_label != 0
        truth = ds.gt_label[nonbg]
        acc_adjusted = np.mean(adjusted[nonbg].argmax(axis=1) + 1 == truth)
        acc_raw = np.mean(ds.zs_logits[nonbg].argmax(axis=1) + 1 == truth)
        assert acc_adjusted - acc_raw >= 0.01

    def test_adjusted_probabilities_match_posterior(self):
        model = zipf_world(k=10)
        result = draw(model, 1000, Regime.TARGET)
        adjusted = adjust_logits(result.dataset.zs_logits,
                                 AdjustmentSpec(model.pretrain_prior, model.target_prior))
        expected = bayes_posterior(model, result.features, model.target_prior)
        assert np.abs(softmax(adjusted, axis=1) - expected).max() <= 1e-9


class TestCalibration:

    def test_temperature(self):
        np.testing.assert_allclose(calibrated_probs(np.array([2.0, 0.0]), 2.0), [0.731059, 0.268941], atol=1e-6)

    def test_high_temperature_flattens(self):
        np.testing.assert_allclose(calibrated_probs(np.array([3.0, -1.0, 0.5]), 1e9), [1 / 3] * 3, atol=1e-8)

    def test_equal_logits(self):
        np.testing.assert_allclose(calibrated_probs(np.zeros(3)), [1 / 3] * 3)

    def test_rejects_tau(self):
        with pytest.raises(ValidationError):
            calibrated_probs(np.zeros(2), -1.0)


class TestFitTau:

    identity = AdjustmentSpec(uniform_prior(10), uniform_prior(10))

    def test_exact_logits_pick_one(self):
        model = zipf_world(k=10)
        ds = filter_nonbackground(generate(model, 12000, Regime.PRETRAIN))
        grid = np.geomspace(0.1, 10.0, 49)
        assert fit_tau(ds, Branch.ZS, self.identity, grid) == pytest.approx(_nearest(grid, 1.0))

    def test_doubled_logits_pick_two(self):
        model = zipf_world(k=10)
        ds = filter_nonbackground(generate(model, 12000, Regime.PRETRAIN))
        doubled = ds.with_logits(zs_logits=2.0 * ds.zs_logits)
        assert fit_tau(doubled, 'zs', self.identity) == pytest.approx(_nearest(DEFAULT_TAU_GRID, 2.0))

    def test_single_sample(self):
        ds = Dataset(RelationLabelSpace(2), ['s0'], ['img0'], [0], [0], [1], [[2.0, 0.0]], [[0.0, 0.0, 0.0]])
        spec = AdjustmentSpec(uniform_prior(2), uniform_prior(2))
        assert fit_tau(ds, Branch.ZS, spec) == pytest.approx(DEFAULT_TAU_GRID[0])

    def test_rejects_background(self):
        ds = Dataset(RelationLabelSpace(2), ['s0'], ['img0'], [0], [0], [0], [[2.0, 0.0]], [[0.0, 0.0, 0.0]])
        with pytest.raises(ValidationError, match='background'):
            fit_tau(ds, Branch.ZS, AdjustmentSpec(uniform_prior(2), uniform_prior(2)))

    def test_sg_branch_drops_background_column(self):
        ds = Dataset(RelationLabelSpace(2), ['s0'], ['img0'], [0], [0], [1], [[0.0, 0.0]], [[9.0, 1.0, 2.0]])
        np.testing.assert_array_equal(branch_logits(ds, Branch.SG), [[1.0, 2.0]])
