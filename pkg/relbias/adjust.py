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

import enum
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import log_softmax, softmax

from .core import BACKGROUND_ID, Dataset, PriorDistribution, ValidationError
from .priors import clamp_probs

_log = logging.getLogger(__name__)

DEFAULT_TAU_GRID = np.geomspace(0.1, 10.0, 50)


class Branch(str, enum.Enum):
    ZS = 'zs'
    SG = 'sg'


def branch_logits(ds: Dataset, branch: Union[Branch, str]) -> np.ndarray:
    """ The k relation logits of a branch; the sg background column is dropped. """
    if Branch(branch) == Branch.ZS:
        return ds.zs_logits
    return ds.sg_logits[:, 1:]


@dataclass(frozen=True)
class AdjustmentSpec:
    """ Move logits from the prior they were trained under to a target prior. """
    train_prior: PriorDistribution
    target_prior: PriorDistribution
    tau: float = 1.0

    def __post_init__(self):
        if self.train_prior.k != self.target_prior.k:
            raise ValidationError(f"train prior has k={self.train_prior.k}, "
                                  f"target prior has k={self.target_prior.k}")
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")

    @property
    def k(self) -> int:
        return self.train_prior.k

    @property
    def log_ratio(self) -> np.ndarray:
        """ log P_ta(r) - log P_tr(r); exactly zero where the priors agree. """
        train = clamp_probs(self.train_prior.probs)
        target = clamp_probs(self.target_prior.probs)
        ratio = np.log(target) - np.log(train)
        ratio[train == target] = 0.0
        return ratio


def adjust_logits(logits: np.ndarray, spec: AdjustmentSpec) -> np.ndarray:
    """ o(r) - log P_tr(r) + log P_ta(r) along the last axis.

    Constant terms are dropped; softmax does not see them.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != spec.k:
        raise ValidationError(f"logits have {logits.shape[-1]} classes, adjustment expects {spec.k}")
    return logits + spec.log_ratio


def calibrated_probs(adjusted: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """ softmax(adjusted / tau) along the last axis. """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    return softmax(np.asarray(adjusted, dtype=np.float64) / tau, axis=-1)


def mean_nll(adjusted: np.ndarray, labels: np.ndarray, tau: float) -> float:
    log_p = log_softmax(adjusted / tau, axis=1)
    return -float(np.mean(log_p[np.arange(labels.size), labels]))


def fit_tau(ds: Dataset, branch: Union[Branch, str], spec: AdjustmentSpec,
            grid: Optional[Sequence[float]] = None) -> float:
    """ Grid temperature with the lowest mean NLL on a non-background set.

    Ties go to the smaller tau.
    """
    if len(ds) == 0:
        raise ValidationError("fit_tau: empty dataset")
    if np.any(ds.gt_label == BACKGROUND_ID):
        raise ValidationError("fit_tau: dataset still contains background samples")
    grid = np.sort(np.asarray(DEFAULT_TAU_GRID if grid is None else grid, dtype=np.float64))
    if grid.size == 0 or np.any(grid <= 0):
        raise ValidationError("tau grid must be non-empty and positive")

    adjusted = adjust_logits(branch_logits(ds, branch), spec)
    labels = ds.gt_label - 1
    nll = np.array([mean_nll(adjusted, labels, tau) for tau in grid])
    best = float(grid[int(np.argmin(nll))])
    _log.info(f'{Branch(branch).value} branch: tau {best:.4g} (nll {nll.min():.6g})')
    return best
