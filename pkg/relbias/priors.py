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

Relation priors: the counted prior of the scene-graph data and the
estimated prior hidden inside a zero-shot model's logits.

The estimate minimises the mean cross-entropy of

    softmax(zs_logits - log(pi_pt) + log(pi_sg))

against the ground-truth relations over pi_pt on the probability simplex.
pi_pt = softmax(theta) keeps every iterate feasible, so the solver works on
the unconstrained theta.
"""

import enum
import logging
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from .core import (BACKGROUND_ID, PRIOR_FLOOR, Dataset, PriorDistribution, PriorSource,
                   RelationLabelSpace, ValidationError)

_log = logging.getLogger(__name__)

# accepted loss increase per step; round-off only
LOSS_SLACK = 1e-12
MAX_HALVINGS = 40


class InitMode(str, enum.Enum):
    UNIFORM = 'uniform'
    COUNTED = 'counted'


class TargetMode(str, enum.Enum):
    UNIFORM = 'uniform'
    TRAINING = 'training'
    FILE = 'file'


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 2000
    learning_rate: float = 0.1
    grad_tol: float = 1e-6
    seed: int = 0
    init: InitMode = InitMode.UNIFORM

    def __post_init__(self):
        object.__setattr__(self, 'init', InitMode(self.init))
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValidationError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.grad_tol > 0:
            raise ValidationError(f"grad_tol must be positive, got {self.grad_tol}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError(f"seed must be an unsigned integer, got {self.seed}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc['init'] = self.init.value
        return doc


@dataclass
class SolverTrace:
    iterations_run: int = 0
    loss_history: List[float] = field(default_factory=list)
    final_grad_norm: float = float('nan')
    converged: bool = False

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float('nan')

    def to_dict(self) -> dict:
        return {'iterations_run': self.iterations_run, 'final_loss': self.final_loss,
                'final_grad_norm': self.final_grad_norm, 'converged': self.converged}


def clamp_probs(probs: np.ndarray, floor: float = PRIOR_FLOOR) -> np.ndarray:
    """ Raise entries to `floor` and take the excess from the entries above it.

    The result sums to one and no entry is below `floor`, so its log is
    finite.
    """
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs / probs.sum()
    low = probs < floor
    if not low.any():
        return probs
    if low.all():
        return np.full_like(probs, 1.0 / probs.size)
    excess = floor * low.sum() - probs[low].sum()
    headroom = probs[~low] - floor
    out = probs.copy()
    out[low] = floor
    out[~low] -= excess * headroom / headroom.sum()
    return out


def clamp_prior(prior: PriorDistribution) -> PriorDistribution:
    return PriorDistribution(clamp_probs(prior.probs), prior.source)


def uniform_prior(k: int) -> PriorDistribution:
    return PriorDistribution(np.full(k, 1.0 / k), PriorSource.UNIFORM)


def zipf_prior(k: int, exponent: float, source: PriorSource = PriorSource.FILE) -> PriorDistribution:
    """ Normalised Zipf law: class r gets mass proportional to r**-exponent. """
    weights = np.arange(1, k + 1, dtype=np.float64) ** -float(exponent)
    return PriorDistribution(weights / weights.sum(), source)


def _require_nonbackground(ds: Dataset, what: str) -> np.ndarray:
    if len(ds) == 0:
        raise ValidationError(f"{what}: empty dataset")
    if np.any(ds.gt_label == BACKGROUND_ID):
        raise ValidationError(f"{what}: dataset still contains background samples")
    return ds.gt_label - 1


def count_prior(ds: Dataset) -> PriorDistribution:
    """ Label frequencies of a non-background dataset, clamped. """
    labels = _require_nonbackground(ds, 'count_prior')
    counts = np.bincount(labels, minlength=ds.k).astype(np.float64)
    return PriorDistribution(clamp_probs(counts / counts.sum()), PriorSource.COUNTED)


def _objective(base: np.ndarray, labels: np.ndarray, log_pi: np.ndarray) -> Tuple[float, np.ndarray]:
    """ Mean cross-entropy of softmax(base - log_pi) against `labels`, and the softmax itself. """
    adjusted = base - log_pi
    log_p = adjusted - logsumexp(adjusted, axis=1, keepdims=True)
    loss = -float(np.mean(log_p[np.arange(labels.size), labels]))
    return loss, np.exp(log_p)


def _newton_direction(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ Solve H d = grad for the Hessian H = mean(diag(p) - p p^T) w.r.t. theta.

    H is singular along the all-ones vector, which softmax ignores; adding
    11^T / k fills that direction and leaves d orthogonal to it.
    """
    n, k = p.shape
    hessian = np.diag(p.mean(axis=0)) - (p.T @ p) / n + 1.0 / k
    try:
        return np.linalg.solve(hessian, grad)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(hessian, grad, rcond=None)[0]


def adjusted_cross_entropy(ds: Dataset, pi_pt: PriorDistribution, pi_sg: PriorDistribution) -> float:
    """ The estimation objective evaluated at a given pretraining prior. """
    labels = _require_nonbackground(ds, 'adjusted_cross_entropy')
    base = ds.zs_logits + np.log(clamp_probs(pi_sg.probs))
    loss, _ = _objective(base, labels, np.log(clamp_probs(pi_pt.probs)))
    return loss


def estimate_prior(ds: Dataset, pi_sg: PriorDistribution,
                   cfg: Optional[SolverConfig] = None) -> Tuple[PriorDistribution, SolverTrace]:
    """ Estimate the prior implicit in the zero-shot logits.

    Full-batch descent on theta with pi_pt = softmax(theta). The objective
    is a softmax cross-entropy in theta, with gradient freq(y) - mean p and
    Hessian mean(diag(p) - p p^T). Each iteration steps `learning_rate`
    along the Newton direction, halving the step until the loss does not
    increase. Stops once the gradient L2 norm drops below `grad_tol`.
    """
    cfg = cfg or SolverConfig()
    labels = _require_nonbackground(ds, 'estimate_prior')
    if pi_sg.k != ds.k:
        raise ValidationError(f"pi_sg has k={pi_sg.k}, dataset has k={ds.k}")

    base = ds.zs_logits + np.log(clamp_probs(pi_sg.probs))
    freq = np.bincount(labels, minlength=ds.k) / labels.size

    if cfg.init == InitMode.COUNTED:
        theta = np.log(clamp_probs(pi_sg.probs))
    else:
        theta = np.zeros(ds.k)

    def evaluate(theta: np.ndarray):
        pi = clamp_probs(softmax(theta))
        loss, p = _objective(base, labels, np.log(pi))
        return pi, loss, p

    pi, loss, p = evaluate(theta)
    grad = freq - p.mean(axis=0)
    trace = SolverTrace(loss_history=[loss])
    while True:
        trace.final_grad_norm = float(np.linalg.norm(grad))
        if trace.final_grad_norm < cfg.grad_tol:
            trace.converged = True
            break
        if trace.iterations_run >= cfg.max_iters:
            break

        direction = _newton_direction(p, grad)
        step = cfg.learning_rate
        for _ in range(MAX_HALVINGS):
            cand_theta = theta - step * direction
            cand = evaluate(cand_theta)
            if cand[1] <= loss + LOSS_SLACK:
                break
            step *= 0.5
        else:
            _log.warning(f'no descent step found after {MAX_HALVINGS} halvings '
                         f'(iteration {trace.iterations_run}, grad norm {trace.final_grad_norm:.3g})')
            break

        theta = cand_theta - cand_theta.mean()
        pi, loss, p = cand
        grad = freq - p.mean(axis=0)
        trace.loss_history.append(loss)
        trace.iterations_run += 1
        if trace.iterations_run % 100 == 0:
            _log.info(f'iteration {trace.iterations_run}: loss {loss:.9g}, '
                      f'grad norm {np.linalg.norm(grad):.3g}')

    if trace.converged:
        _log.info(f'prior estimate converged after {trace.iterations_run} iterations, loss {loss:.9g}')
    else:
        _log.warning(f'prior estimate not converged after {trace.iterations_run} iterations '
                     f'(grad norm {trace.final_grad_norm:.3g} >= {cfg.grad_tol})')
    return PriorDistribution(pi, PriorSource.ESTIMATED), trace


def target_prior(space: Union[RelationLabelSpace, int], mode: Union[TargetMode, str],
                 arg: Union[PriorDistribution, str, None] = None) -> PriorDistribution:
    """ The distribution the adjusted logits should reflect.

    uniform: 1/k each; training: `arg` (the counted prior) unchanged;
    file: `arg` is a prior file path, clamped like every prior that reaches a log.
    """
    k = space.k if isinstance(space, RelationLabelSpace) else int(space)
    mode = TargetMode(mode)
    if mode == TargetMode.UNIFORM:
        return uniform_prior(k)
    if arg is None:
        raise ValidationError(f"target mode {mode.value} needs an argument")
    if mode == TargetMode.TRAINING:
        if not isinstance(arg, PriorDistribution):
            raise ValidationError("training target needs the counted prior")
        if arg.k != k:
            raise ValidationError(f"training prior has k={arg.k}, expected {k}")
        return arg
    from .tables import read_prior
    return clamp_prior(read_prior(str(arg), k=k, source=PriorSource.FILE))


def parse_prior_spec(text: str, k: int) -> PriorDistribution:
    """ `uniform`, `zipf:<a>`, `file:<path>` or comma separated probabilities. """
    text = text.strip()
    if text == 'uniform':
        return uniform_prior(k)
    if text.startswith('zipf:'):
        try:
            exponent = float(text[5:])
        except ValueError:
            raise ValidationError(f"bad zipf exponent in {text!r}") from None
        return zipf_prior(k, exponent)
    if text.startswith('file:'):
        return target_prior(k, TargetMode.FILE, text[5:])
    try:
        probs = np.array([float(v) for v in text.split(',')])
    except ValueError:
        raise ValidationError(f"cannot parse prior {text!r}") from None
    if probs.size != k:
        raise ValidationError(f"prior {text!r} has {probs.size} entries, expected {k}")
    return clamp_prior(PriorDistribution(probs / probs.sum(), PriorSource.FILE))


if __name__ == "__main__":
    print(zipf_prior(5, 1.0).probs)
    print(clamp_probs(np.array([1.0, 0.0, 0.0])))
