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

import collections
import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, FrozenSet, Iterator, Union

import numpy as np

_log = logging.getLogger(__name__)

BACKGROUND_ID = 0
PRIOR_FLOOR = 1e-8
PRIOR_SUM_TOL = 1e-6

Triplet = Tuple[int, int, int]


class RelbiasError(Exception):
    """Root of all errors raised by relbias."""


class ValidationError(RelbiasError, ValueError):
    pass


class DatasetError(RelbiasError):
    pass


class IncompatibleReportsError(RelbiasError):
    pass


class StageError(RelbiasError):
    def __init__(self, stage: str, path: Optional[str], cause: BaseException):
        self.stage = stage
        self.path = path
        self.cause = cause
        where = f" ({path})" if path else ""
        super().__init__(f"{stage} stage failed{where}: {cause}")


@dataclass(frozen=True)
class RelationLabelSpace:
    """ K non-background relation classes plus background class 0. """
    k: int
    class_names: Optional[Tuple[str, ...]] = None
    background_id: int = BACKGROUND_ID

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 2:
            raise ValidationError(f"label space needs k >= 2, got {self.k}")
        if self.background_id != BACKGROUND_ID:
            raise ValidationError("background id is fixed at 0")
        if self.class_names is not None:
            names = tuple(self.class_names)
            if len(names) != self.k:
                raise ValidationError(f"{len(names)} class names for k={self.k}")
            if any(not n for n in names) or len(set(names)) != len(names):
                raise ValidationError("class names must be unique and non-empty")
            object.__setattr__(self, 'class_names', names)

    def name(self, relation: int) -> str:
        if relation == BACKGROUND_ID:
            return '__background__'
        if self.class_names is None:
            return str(relation)
        return self.class_names[relation - 1]


@dataclass(frozen=True)
class RelationSample:
    sample_id: str
    image_id: str
    subject_class: int
    object_class: int
    gt_label: int
    zs_logits: np.ndarray
    sg_logits: np.ndarray

    @property
    def triplet(self) -> Triplet:
        return self.subject_class, self.gt_label, self.object_class


class PriorSource(str, enum.Enum):
    COUNTED = 'counted'
    ESTIMATED = 'estimated'
    UNIFORM = 'uniform'
    FILE = 'file'


@dataclass(frozen=True, eq=False)
class PriorDistribution:
    """ A point on the simplex over the k non-background relations. """
    probs: np.ndarray
    source: PriorSource

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise ValidationError(f"prior must be a vector of length >= 2, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValidationError("prior entries must be finite and non-negative")
        if abs(probs.sum() - 1.0) > PRIOR_SUM_TOL:
            raise ValidationError(f"prior sums to {probs.sum():.9g}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)
        object.__setattr__(self, 'source', PriorSource(self.source))

    @property
    def k(self) -> int:
        return self.probs.size

    def log(self) -> np.ndarray:
        return np.log(self.probs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PriorDistribution):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.probs, other.probs)


def _frozen(array, dtype) -> np.ndarray:
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """ Column-oriented set of relation samples over one label space.

    Row i of every column belongs to the sample `sample_ids[i]`. Datasets
    coming out of `load_dataset` are in canonical order (ascending
    sample_id).
    """
    space: RelationLabelSpace
    sample_ids: Tuple[str, ...]
    image_ids: Tuple[str, ...]
    subject_class: np.ndarray
    object_class: np.ndarray
    gt_label: np.ndarray
    zs_logits: np.ndarray
    sg_logits: np.ndarray
    gt_triplet_inventory: Optional[FrozenSet[Triplet]] = None
    source: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        k = self.space.k
        n = len(self.sample_ids)
        object.__setattr__(self, 'sample_ids', tuple(self.sample_ids))
        object.__setattr__(self, 'image_ids', tuple(self.image_ids))
        for name in ('subject_class', 'object_class', 'gt_label'):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64).reshape(n))
        object.__setattr__(self, 'zs_logits', _frozen(self.zs_logits, np.float64).reshape(n, k))
        object.__setattr__(self, 'sg_logits', _frozen(self.sg_logits, np.float64).reshape(n, k + 1))
        if self.gt_triplet_inventory is not None:
            object.__setattr__(self, 'gt_triplet_inventory', frozenset(self.gt_triplet_inventory))
        self.validate()

    def validate(self) -> None:
        n = len(self.sample_ids)
        if len(self.image_ids) != n:
            raise DatasetError(f"{len(self.image_ids)} image ids for {n} samples")
        if len(set(self.sample_ids)) != n:
            dup = collections.Counter(self.sample_ids).most_common(1)[0][0]
            raise DatasetError(f"duplicate sample_id {dup}")
        if any(not img for img in self.image_ids):
            raise DatasetError("every sample needs an image_id")
        if n and (self.gt_label.min() < 0 or self.gt_label.max() > self.space.k):
            raise DatasetError(f"gt_label outside 0..{self.space.k}")
        if n and (self.subject_class.min() < 0 or self.object_class.min() < 0):
            raise DatasetError("object class ids must be non-negative")
        for name in ('zs_logits', 'sg_logits'):
            finite = np.isfinite(getattr(self, name)).all(axis=1)
            if not finite.all():
                bad = self.sample_ids[int(np.argmin(finite))]
                raise DatasetError(f"non-finite logit at sample_id {bad}")

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, index: int) -> RelationSample:
        return RelationSample(self.sample_ids[index], self.image_ids[index],
                              int(self.subject_class[index]), int(self.object_class[index]),
                              int(self.gt_label[index]), self.zs_logits[index], self.sg_logits[index])

    def __iter__(self) -> Iterator[RelationSample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.space == other.space
                and self.sample_ids == other.sample_ids
                and self.image_ids == other.image_ids
                and self.gt_triplet_inventory == other.gt_triplet_inventory
                and all(np.array_equal(getattr(self, name), getattr(other, name))
                        for name in ('subject_class', 'object_class', 'gt_label', 'zs_logits', 'sg_logits')))

    @property
    def k(self) -> int:
        return self.space.k

    @property
    def triplets(self) -> Tuple[Triplet, ...]:
        return tuple(zip(self.subject_class.tolist(), self.gt_label.tolist(), self.object_class.tolist()))

    def select(self, rows: Union[np.ndarray, Sequence[int]]) -> 'Dataset':
        """ Subset by boolean mask or index array, keeping the given order. """
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        rows = rows.astype(np.int64)
        return replace(self,
                       sample_ids=tuple(self.sample_ids[i] for i in rows),
                       image_ids=tuple(self.image_ids[i] for i in rows),
                       subject_class=self.subject_class[rows],
                       object_class=self.object_class[rows],
                       gt_label=self.gt_label[rows],
                       zs_logits=self.zs_logits[rows],
                       sg_logits=self.sg_logits[rows])

    def canonical(self) -> 'Dataset':
        order = sorted(range(len(self)), key=self.sample_ids.__getitem__)
        return self.select(np.array(order, dtype=np.int64))

    def with_logits(self, zs_logits=None, sg_logits=None) -> 'Dataset':
        return replace(self,
                       zs_logits=self.zs_logits if zs_logits is None else zs_logits,
                       sg_logits=self.sg_logits if sg_logits is None else sg_logits)


def filter_nonbackground(ds: Dataset) -> Dataset:
    """ Keep only samples annotated with a non-background relation. """
    kept = ds.select(ds.gt_label != BACKGROUND_ID)
    _log.info(f'{len(kept)} of {len(ds)} samples carry a non-background relation')
    return kept
