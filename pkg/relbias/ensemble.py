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

Certainty-aware fusion of the zero-shot and scene-graph branches.

All functions work on a single sample (vectors of length k) as well as on
a batch (arrays of shape (n, k)); class scores always run along the last
axis.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, softmax

from .core import ValidationError
from .adjust import calibrated_probs

_log = logging.getLogger(__name__)

NORM_TOL = 1e-9


def _check_probs(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=NORM_TOL):
        raise ValidationError(f"{name} is not a probability sequence")
    return p


@dataclass(frozen=True)
class EnsembleWeights:
    """ Max-probability confidence of each branch and the sg weight. """
    conf_zs: np.ndarray
    conf_sg: np.ndarray
    scale: float
    w_cer: np.ndarray


@dataclass(frozen=True)
class EnsembleOutput:
    """ Distribution over background + k relations.

    `p_relations` is already scaled by (1 - p_background).
    """
    p_background: np.ndarray
    p_relations: np.ndarray
    weights: Optional[EnsembleWeights] = None

    def full(self) -> np.ndarray:
        """ Probabilities over {0} + relations, background in column 0. """
        return np.concatenate([np.asarray(self.p_background)[..., None], self.p_relations], axis=-1)

    def predicted_relation(self) -> np.ndarray:
        """ Top non-background relation (1-based), lowest index on ties. """
        return np.argmax(self.p_relations, axis=-1) + 1


def certainty_weight(p_zs: np.ndarray, p_sg: np.ndarray, scale: float = 1.0) -> EnsembleWeights:
    """ w_cer = sigmoid((conf_sg - conf_zs) / scale), conf = max probability. """
    p_zs = _check_probs(p_zs, 'p_zs')
    p_sg = _check_probs(p_sg, 'p_sg')
    if p_zs.shape != p_sg.shape:
        raise ValidationError(f"branch shapes differ: {p_zs.shape} vs {p_sg.shape}")
    if not scale > 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    conf_zs = p_zs.max(axis=-1)
    conf_sg = p_sg.max(axis=-1)
    return EnsembleWeights(conf_zs, conf_sg, float(scale), expit((conf_sg - conf_zs) / scale))


def fuse_relations(p_zs: np.ndarray, p_sg: np.ndarray, w: EnsembleWeights) -> np.ndarray:
    """ w_cer * p_sg + (1 - w_cer) * p_zs. """
    p_zs = _check_probs(p_zs, 'p_zs')
    p_sg = _check_probs(p_sg, 'p_sg')
    if p_zs.shape != p_sg.shape:
        raise ValidationError(f"branch shapes differ: {p_zs.shape} vs {p_sg.shape}")
    w_cer = np.asarray(w.w_cer, dtype=np.float64)[..., None]
    return w_cer * p_sg + (1.0 - w_cer) * p_zs


def compose_full(sample, p_ens_relations: np.ndarray,
                 weights: Optional[EnsembleWeights] = None) -> EnsembleOutput:
    """ Attach the background probability of the raw sg logits.

    `sample` is a RelationSample, a Dataset, or the raw sg logits (k+1
    columns, background first) themselves. Debiased logits must not be
    passed here.
    """
    sg_logits = np.asarray(getattr(sample, 'sg_logits', sample), dtype=np.float64)
    p_ens = _check_probs(p_ens_relations, 'p_ens_relations')
    if sg_logits.shape[-1] != p_ens.shape[-1] + 1 or sg_logits.shape[:-1] != p_ens.shape[:-1]:
        raise ValidationError(f"sg logits {sg_logits.shape} do not match relations {p_ens.shape}")
    p_background = softmax(sg_logits, axis=-1)[..., 0]
    return EnsembleOutput(p_background, (1.0 - p_background)[..., None] * p_ens, weights)


def ensemble_branches(zs_adjusted: np.ndarray, sg_adjusted: np.ndarray, sg_raw: np.ndarray,
                      tau_zs: float = 1.0, tau_sg: float = 1.0, scale: float = 1.0) -> EnsembleOutput:
    """ Calibrate, weigh, fuse and recompose both debiased branches. """
    p_zs = calibrated_probs(zs_adjusted, tau_zs)
    p_sg = calibrated_probs(sg_adjusted, tau_sg)
    weights = certainty_weight(p_zs, p_sg, scale)
    out = compose_full(sg_raw, fuse_relations(p_zs, p_sg, weights), weights)
    _log.info(f'fused {np.size(weights.w_cer)} samples, mean w_cer {np.mean(weights.w_cer):.4f}')
    return out


def single_branch(adjusted: np.ndarray, sg_raw: np.ndarray, tau: float = 1.0) -> EnsembleOutput:
    """ One branch alone, composed with the sg background probability. """
    return compose_full(sg_raw, calibrated_probs(adjusted, tau))
