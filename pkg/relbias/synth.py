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

Synthetic label-shift worlds with a closed-form Bayes oracle.

Features are drawn from unit-covariance Gaussians centred at one mean per
relation class, so the Bayes logits under any prior are

    log prior(r) + x . mu_r - |mu_r|^2 / 2

(the shared -|x|^2 / 2 term drops out of the softmax). The zero-shot
branch gets exact Bayes logits under the pretraining prior; the
scene-graph branch gets them under the sgg prior, plus a background
column, plus noise on an underrepresented subset.

All randomness comes from numpy's PCG64 generator: class means are drawn
from `seed`, each regime's samples from `seed + offset`.
"""

import enum
import logging
import os
from dataclasses import dataclass, field
from typing import FrozenSet, Optional, Union

import numpy as np
from scipy.special import log_softmax, softmax

from .core import Dataset, PriorDistribution, RelationLabelSpace, Triplet, ValidationError
from .priors import clamp_probs

_log = logging.getLogger(__name__)

BACKGROUND_RATE = 0.2
BACKGROUND_BOOST = 2.0
PAIRS_PER_IMAGE = 8
UNDERREP_ID_OFFSET = 1000


class Regime(str, enum.Enum):
    PRETRAIN = 'pretrain'
    SGG = 'sgg'
    TARGET = 'target'


REGIME_SEED_OFFSET = {Regime.PRETRAIN: 1, Regime.SGG: 2, Regime.TARGET: 3}


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class SynthModel:
    """ A label-shift world: class means plus the three regime priors.

    The class means are regenerated from `seed`, so equal fields give an
    identical world.
    """
    k: int
    pretrain_prior: PriorDistribution
    sgg_prior: PriorDistribution
    target_prior: PriorDistribution
    dim: int = 8
    separation: float = 2.0
    underrep_fraction: float = 0.1
    noise_sg: float = 3.0
    seed: int = 0
    n_objects: int = 10
    class_means: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        RelationLabelSpace(self.k)
        for name in ('pretrain_prior', 'sgg_prior', 'target_prior'):
            if getattr(self, name).k != self.k:
                raise ValidationError(f"{name} has k={getattr(self, name).k}, model has k={self.k}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValidationError(f"dim must be a positive integer, got {self.dim}")
        if not self.separation > 0:
            raise ValidationError(f"separation must be positive, got {self.separation}")
        if not 0.0 <= self.underrep_fraction < 1.0:
            raise ValidationError(f"underrep_fraction must be in [0, 1), got {self.underrep_fraction}")
        if not self.noise_sg >= 0:
            raise ValidationError(f"noise_sg must be non-negative, got {self.noise_sg}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError(f"seed must be an unsigned integer, got {self.seed}")
        if self.n_objects < 1 or self.n_objects > UNDERREP_ID_OFFSET:
            raise ValidationError(f"n_objects must be in 1..{UNDERREP_ID_OFFSET}, got {self.n_objects}")

        means = _rng(self.seed).standard_normal((self.k, self.dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        means *= self.separation
        means.setflags(write=False)
        object.__setattr__(self, 'class_means', means)

    def prior(self, regime: Union[Regime, str]) -> PriorDistribution:
        try:
            regime = Regime(regime)
        except ValueError:
            raise ValidationError(f"invalid regime {regime!r}") from None
        return getattr(self, f'{regime.value}_prior')


@dataclass(frozen=True, eq=False)
class SynthDraw:
    """ A generated dataset together with the hidden variables behind it. """
    dataset: Dataset
    features: np.ndarray
    underrep: np.ndarray
    background: np.ndarray


def bayes_logits(model: SynthModel, features: np.ndarray, prior: PriorDistribution) -> np.ndarray:
    """ Exact Bayes relation logits of `features` under `prior`, up to a per-sample constant. """
    if prior.k != model.k:
        raise ValidationError(f"prior has k={prior.k}, model has k={model.k}")
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    means = model.class_means
    loglik = x @ means.T - 0.5 * np.sum(means * means, axis=1)
    logits = np.log(clamp_probs(prior.probs)) + loglik
    return logits if np.ndim(features) > 1 else logits[0]


def bayes_posterior(model: SynthModel, features: np.ndarray, prior: PriorDistribution) -> np.ndarray:
    """ True posterior over the k relations under `prior`. """
    return softmax(bayes_logits(model, features, prior), axis=-1)


def train_triplets(model: SynthModel) -> FrozenSet[Triplet]:
    """ Every triplet over the ordinary object ids.

    Underrepresented samples use object ids shifted by UNDERREP_ID_OFFSET,
    so exactly those samples fall outside this inventory.
    """
    objects = range(model.n_objects)
    return frozenset((s, r, o) for s in objects for r in range(1, model.k + 1) for o in objects)


def draw(model: SynthModel, n: int, regime: Union[Regime, str]) -> SynthDraw:
    """ Draw n samples of a regime with the hidden features and subset masks. """
    prior = model.prior(regime)
    regime = Regime(regime)
    if int(n) != n or n < 1:
        raise ValidationError(f"n must be a positive integer, got {n}")
    rng = _rng(model.seed + REGIME_SEED_OFFSET[regime])

    background = rng.random(n) < BACKGROUND_RATE
    relation = rng.choice(model.k, size=n, p=clamp_probs(prior.probs)) + 1
    features = model.class_means[relation - 1] + rng.standard_normal((n, model.dim))
    underrep = rng.random(n) < model.underrep_fraction
    noise = rng.standard_normal((n, model.k)) * model.noise_sg
    subject_class = rng.integers(0, model.n_objects, size=n)
    object_class = rng.integers(0, model.n_objects, size=n)

    zs_logits = bayes_logits(model, features, model.pretrain_prior)
    sg_relations = log_softmax(bayes_logits(model, features, model.sgg_prior), axis=1)
    sg_relations = np.where(underrep[:, None], sg_relations + noise, sg_relations)
    sg_background = np.log(BACKGROUND_RATE / (1.0 - BACKGROUND_RATE)) + BACKGROUND_BOOST * background
    sg_logits = np.concatenate([sg_background[:, None], sg_relations], axis=1)

    shift = np.where(underrep, UNDERREP_ID_OFFSET, 0)
    ds = Dataset(RelationLabelSpace(model.k),
                 tuple(f's{i:07d}' for i in range(n)),
                 tuple(f'img{i // PAIRS_PER_IMAGE:06d}' for i in range(n)),
                 subject_class + shift, object_class + shift,
                 np.where(background, 0, relation),
                 zs_logits, sg_logits,
                 gt_triplet_inventory=train_triplets(model),
                 source=f'synth:{regime.value}')
    _log.info(f'drew {n} {regime.value} samples: {int(background.sum())} background, '
              f'{int(underrep.sum())} underrepresented')
    return SynthDraw(ds, features, underrep, background)


def generate(model: SynthModel, n: int, regime: Union[Regime, str]) -> Dataset:
    return draw(model, n, regime).dataset


def write_world(model: SynthModel, n: int, out_dir: str,
                regime: Union[Regime, str] = Regime.SGG, meta: Optional[dict] = None) -> str:
    """ Write manifest, logit tables, inventory, priors and the underrep list.

    Returns the manifest path.
    """
    from .tables import save_dataset, write_prior

    result = draw(model, n, regime)
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, 'manifest.json')
    save_dataset(result.dataset, manifest)
    for name in ('pretrain', 'sgg', 'target'):
        write_prior(os.path.join(out_dir, f'{name}_prior.json'), model.prior(name), meta)
    with open(os.path.join(out_dir, 'underrep.tsv'), 'w', encoding='utf-8', newline='\n') as f:
        f.write('sample_id\n')
        for i in np.flatnonzero(result.underrep):
            f.write(result.dataset.sample_ids[i] + '\n')
    _log.info(f'synthetic world written to {out_dir}')
    return manifest


if __name__ == "__main__":
    from .priors import zipf_prior, uniform_prior

    world = SynthModel(5, zipf_prior(5, 1.0), zipf_prior(5, 0.7), uniform_prior(5))
    sample = draw(world, 16, Regime.TARGET)
    print(sample.dataset.gt_label)
    print(bayes_posterior(world, sample.features[:2], world.target_prior))
