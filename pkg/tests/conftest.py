import os

import numpy as np
import pytest

from relbias.config import PipelineConfig
from relbias.pipeline import Pipeline
from relbias.priors import uniform_prior, zipf_prior
from relbias.synth import SynthModel, write_world

DATA_DIR = os.path.join(os.path.dirname(__file__), 'data')


@pytest.fixture
def tiny_manifest():
    return os.path.join(DATA_DIR, 'tiny', 'manifest.json')


@pytest.fixture
def empty_manifest():
    return os.path.join(DATA_DIR, 'empty', 'manifest.json')


def zipf_world(k=50, pretrain=1.0, sgg=0.7, **kwargs) -> SynthModel:
    """ The standard label-shift world: Zipf pretraining and sgg priors, uniform target. """
    return SynthModel(k, zipf_prior(k, pretrain), zipf_prior(k, sgg), uniform_prior(k), **kwargs)


@pytest.fixture
def small_world(tmp_path):
    """ k=5 world with 2000 sgg samples written to disk; returns the manifest path. """
    return write_world(zipf_world(k=5), 2000, str(tmp_path / 'world'))


@pytest.fixture(scope='session')
def standard_fixture(tmp_path_factory):
    """ k=50, 50000 sgg samples, seed 0, separation 2.0, 10 % underrepresented. """
    out = tmp_path_factory.mktemp('standard')
    return write_world(zipf_world(), 50000, str(out / 'world'))


@pytest.fixture(scope='session')
def standard_run(standard_fixture, tmp_path_factory):
    """ Full pipeline on the standard fixture with the training target. """
    out = tmp_path_factory.mktemp('standard_run')
    cfg = PipelineConfig.build(manifest=standard_fixture, target='training', out_dir=str(out))
    pipe = Pipeline(cfg)
    report = pipe.run()
    return pipe, report


def l1(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).sum())
