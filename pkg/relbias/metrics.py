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

Scene-graph evaluation in the predicate classification setting: object
pairs and their classes are given, only the relation is predicted.

Averages are taken with math.fsum, so no metric depends on sample order.
"""

import collections
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import BACKGROUND_ID, Dataset, Triplet, ValidationError

_log = logging.getLogger(__name__)

SAMPLE_SPLITS = ('all', 'seen', 'unseen')
CLASS_SPLITS = ('frequent', 'medium', 'rare')
ALL_SPLITS = SAMPLE_SPLITS + CLASS_SPLITS
DEFAULT_CUTOFFS = (20, 50, 100)

Candidate = Tuple[float, str, int]


def _mean(values: Sequence[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


@dataclass(frozen=True)
class SceneGroundTruth:
    """ Annotated (sample_id, relation) pairs of one image. """
    image_id: str
    gt_triplets: FrozenSet[Tuple[str, int]]

    def __post_init__(self):
        object.__setattr__(self, 'gt_triplets', frozenset(self.gt_triplets))
        if any(r <= BACKGROUND_ID for _, r in self.gt_triplets):
            raise ValidationError(f"image {self.image_id}: ground truth relations must be >= 1")


def scene_ground_truth(ds: Dataset, mask: Optional[np.ndarray] = None) -> List[SceneGroundTruth]:
    """ Per-image ground truth from the non-background samples (optionally masked). """
    keep = ds.gt_label != BACKGROUND_ID
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    per_image = collections.defaultdict(set)
    for i in np.flatnonzero(keep):
        per_image[ds.image_ids[i]].add((ds.sample_ids[i], int(ds.gt_label[i])))
    return [SceneGroundTruth(image, frozenset(pairs)) for image, pairs in sorted(per_image.items())]


@dataclass(frozen=True, eq=False)
class Predictions:
    """ Relation scores (k columns, class r at column r-1) per sample. """
    sample_ids: Tuple[str, ...]
    image_ids: Tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] != len(self.sample_ids) or len(self.image_ids) != len(self.sample_ids):
            raise ValidationError(f"prediction scores {scores.shape} do not match {len(self.sample_ids)} samples")
        object.__setattr__(self, 'scores', scores)
        object.__setattr__(self, 'sample_ids', tuple(self.sample_ids))
        object.__setattr__(self, 'image_ids', tuple(self.image_ids))

    @classmethod
    def from_output(cls, ds: Dataset, output) -> 'Predictions':
        """ Predictions from an EnsembleOutput aligned with `ds`. """
        return cls(ds.sample_ids, ds.image_ids, output.p_relations)

    @property
    def k(self) -> int:
        return self.scores.shape[1]

    def index(self) -> Dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}

    def by_image(self) -> Dict[str, List[int]]:
        rows = collections.defaultdict(list)
        for i, image in enumerate(self.image_ids):
            rows[image].append(i)
        return rows

    def predicted_relation(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1) + 1


def _candidates(preds: Predictions, rows: Iterable[int], graph_constraint: bool) -> List[Candidate]:
    cands = []
    for i in rows:
        sid = preds.sample_ids[i]
        row = preds.scores[i]
        if graph_constraint:
            r = int(np.argmax(row))
            cands.append((float(row[r]), sid, r + 1))
        else:
            cands.extend((float(score), sid, r + 1) for r, score in enumerate(row))
    return cands


def rank_key(cand: Candidate) -> Tuple[float, str, int]:
    score, sid, rel = cand
    return -score, sid, rel


@dataclass
class RecallResult:
    recall_at: Dict[int, Optional[float]]
    mrecall_at: Dict[int, Optional[float]]
    per_class_recall: Dict[int, List[Optional[float]]]
    images: int


def recall_at_k(preds: Predictions, gts: Sequence[SceneGroundTruth], cutoffs: Sequence[int],
                graph_constraint: bool = True) -> RecallResult:
    """ Recall@K and mean Recall@K over ranked triplet candidates per image.

    Every pair of an image contributes its candidates (one with the graph
    constraint, k without). Images without ground truth are skipped; mean
    recall averages, per class, the per-image recall of that class over the
    images containing it, then over the classes present.
    """
    cutoffs = sorted(int(c) for c in cutoffs)
    if not cutoffs or cutoffs[0] < 1:
        raise ValidationError(f"cutoffs must be >= 1, got {cutoffs}")
    index = preds.index()
    rows_by_image = preds.by_image()

    recalls = {c: [] for c in cutoffs}
    class_ratios = {c: collections.defaultdict(list) for c in cutoffs}
    images = 0
    for gt in gts:
        if not gt.gt_triplets:
            continue
        for sid, _ in gt.gt_triplets:
            if sid not in index:
                raise ValidationError(f"prediction missing for sample_id {sid}")
        images += 1
        ranked = sorted(_candidates(preds, rows_by_image.get(gt.image_id, ()), graph_constraint), key=rank_key)
        per_class_total = collections.Counter(r for _, r in gt.gt_triplets)
        for c in cutoffs:
            top = {(sid, rel) for _, sid, rel in ranked[:c]}
            hits = gt.gt_triplets & top
            recalls[c].append(len(hits) / len(gt.gt_triplets))
            per_class_hits = collections.Counter(r for _, r in hits)
            for r, total in per_class_total.items():
                class_ratios[c][r].append(per_class_hits[r] / total)

    result = RecallResult({}, {}, {}, images)
    for c in cutoffs:
        result.recall_at[c] = _mean(recalls[c])
        per_class = [_mean(class_ratios[c].get(r, [])) for r in range(1, preds.k + 1)]
        result.per_class_recall[c] = per_class
        result.mrecall_at[c] = _mean([v for v in per_class if v is not None])
    return result


def classification_acc(preds: Predictions, ds: Dataset,
                       mask: Optional[np.ndarray] = None) -> Tuple[float, float, List[Optional[float]]]:
    """ Top-1 accuracy, class-wise mean accuracy and per-class accuracy.

    Only non-background samples count; background is never predicted.
    """
    keep = ds.gt_label != BACKGROUND_ID
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise ValidationError("classification_acc: no non-background samples")
    index = preds.index()
    try:
        pred_rows = np.array([index[ds.sample_ids[i]] for i in rows], dtype=np.int64)
    except KeyError as err:
        raise ValidationError(f"prediction missing for sample_id {err.args[0]}") from None

    predicted = preds.predicted_relation()[pred_rows]
    truth = ds.gt_label[rows]
    correct = predicted == truth
    per_class = []
    for r in range(1, ds.k + 1):
        of_class = truth == r
        per_class.append(float(correct[of_class].sum()) / int(of_class.sum()) if of_class.any() else None)
    acc = float(correct.sum()) / rows.size
    macc = _mean([v for v in per_class if v is not None])
    return acc, macc, per_class


@dataclass(frozen=True)
class FrequencyBuckets:
    """ Frequent / medium / rare classes by training count.

    Without thresholds the classes are ranked by count (ties by class id)
    and split 30 % / 40 % / 30 %, i.e. 15/20/15 at k=50. With thresholds a
    class is frequent at count >= hi and medium at count >= lo.
    """
    hi: Optional[float] = None
    lo: Optional[float] = None

    def __post_init__(self):
        if (self.hi is None) != (self.lo is None):
            raise ValidationError("frequency buckets need both thresholds or none")
        if self.hi is not None and self.hi < self.lo:
            raise ValidationError(f"bucket thresholds must satisfy hi >= lo, got {self.hi},{self.lo}")

    @classmethod
    def parse(cls, text: str) -> Optional['FrequencyBuckets']:
        text = text.strip()
        if text in ('', 'none'):
            return None
        if text == 'auto':
            return cls()
        try:
            hi, lo = (float(v) for v in text.split(','))
        except ValueError:
            raise ValidationError(f"buckets must be 'auto', 'none' or 'hi,lo', got {text!r}") from None
        return cls(hi, lo)

    def assign(self, class_counts: np.ndarray) -> Dict[str, FrozenSet[int]]:
        counts = np.asarray(class_counts, dtype=np.float64)
        k = counts.size
        if self.hi is None:
            order = np.argsort(-counts, kind='stable') + 1
            n_freq = int(round(0.3 * k))
            n_med = int(round(0.4 * k))
            groups = (order[:n_freq], order[n_freq:n_freq + n_med], order[n_freq + n_med:])
        else:
            classes = np.arange(1, k + 1)
            groups = (classes[counts >= self.hi],
                      classes[(counts < self.hi) & (counts >= self.lo)],
                      classes[counts < self.lo])
        return {name: frozenset(int(c) for c in group) for name, group in zip(CLASS_SPLITS, groups)}


@dataclass
class MetricReport:
    count: int
    recall_at: Dict[int, Optional[float]]
    mrecall_at: Dict[int, Optional[float]]
    acc: Optional[float]
    macc: Optional[float]
    per_class_acc: List[Optional[float]]
    per_class_recall: Dict[int, List[Optional[float]]]
    splits: Optional[Dict[str, Optional['MetricReport']]] = None
    split_counts: Dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        """ Every value in [0, 1]; mean recall is the mean of the present classes. """
        values = [self.acc, self.macc] + list(self.per_class_acc)
        values += list(self.recall_at.values()) + list(self.mrecall_at.values())
        for c, per_class in self.per_class_recall.items():
            values += per_class
            if self.mrecall_at.get(c) != _mean([v for v in per_class if v is not None]):
                raise ValidationError(f"mR@{c} is not the mean of its per-class recalls")
        for v in values:
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValidationError(f"metric value {v} outside [0, 1]")
        for sub in (self.splits or {}).values():
            if sub is not None:
                sub.validate()

    def to_dict(self) -> dict:
        doc = {
            'count': self.count,
            'recall_at': {str(c): v for c, v in self.recall_at.items()},
            'mrecall_at': {str(c): v for c, v in self.mrecall_at.items()},
            'acc': self.acc,
            'macc': self.macc,
            'per_class_acc': list(self.per_class_acc),
            'per_class_recall': {str(c): list(v) for c, v in self.per_class_recall.items()},
        }
        if self.splits is not None:
            doc['splits'] = {name: (sub.to_dict() if sub is not None else None) for name, sub in self.splits.items()}
            doc['split_counts'] = dict(self.split_counts)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> 'MetricReport':
        splits = doc.get('splits')
        return cls(
            count=int(doc['count']),
            recall_at={int(c): v for c, v in doc['recall_at'].items()},
            mrecall_at={int(c): v for c, v in doc['mrecall_at'].items()},
            acc=doc['acc'],
            macc=doc['macc'],
            per_class_acc=list(doc['per_class_acc']),
            per_class_recall={int(c): list(v) for c, v in doc['per_class_recall'].items()},
            splits=None if splits is None else {
                name: (cls.from_dict(sub) if sub is not None else None) for name, sub in splits.items()},
            split_counts=dict(doc.get('split_counts', {})),
        )


def evaluate(preds: Predictions, ds: Dataset, cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
             mask: Optional[np.ndarray] = None, graph_constraint: bool = True) -> Optional[MetricReport]:
    """ Full report for the ground truth selected by `mask` (None if it selects nothing). """
    keep = ds.gt_label != BACKGROUND_ID
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        return None
    recall = recall_at_k(preds, scene_ground_truth(ds, keep), cutoffs, graph_constraint)
    acc, macc, per_class = classification_acc(preds, ds, keep)
    return MetricReport(count, recall.recall_at, recall.mrecall_at, acc, macc, per_class, recall.per_class_recall)


def split_report(preds: Predictions, ds: Dataset, inventory: Optional[FrozenSet[Triplet]] = None,
                 freq_buckets: Optional[FrequencyBuckets] = None, cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
                 splits: Sequence[str] = ALL_SPLITS, class_counts: Optional[np.ndarray] = None,
                 graph_constraint: bool = True) -> MetricReport:
    """ Report on all samples with nested reports for each requested split.

    seen/unseen split the samples by whether their (subject, relation,
    object) triplet occurs in the training inventory; frequent/medium/rare
    split the classes by training count (`class_counts`, defaulting to the
    label counts of `ds`). Empty splits are reported as None with count 0.
    """
    unknown = set(splits) - set(ALL_SPLITS)
    if unknown:
        raise ValidationError(f"unknown splits {sorted(unknown)}")
    report = evaluate(preds, ds, cutoffs, graph_constraint=graph_constraint)
    if report is None:
        raise ValidationError("split_report: no non-background samples")

    masks = {'all': np.ones(len(ds), dtype=bool)}
    if 'seen' in splits or 'unseen' in splits:
        inventory = ds.gt_triplet_inventory if inventory is None else inventory
        if inventory is None:
            raise ValidationError("triplet inventory missing; needed for seen/unseen splits")
        seen = np.array([t in inventory for t in ds.triplets], dtype=bool)
        masks['seen'] = seen
        masks['unseen'] = ~seen
    if any(name in splits for name in CLASS_SPLITS):
        buckets = freq_buckets or FrequencyBuckets()
        if class_counts is None:
            nonbg = ds.gt_label[ds.gt_label != BACKGROUND_ID]
            class_counts = np.bincount(nonbg - 1, minlength=ds.k)
        for name, classes in buckets.assign(class_counts).items():
            masks[name] = np.isin(ds.gt_label, list(classes))

    report.splits = {}
    for name in splits:
        sub = report if name == 'all' else evaluate(preds, ds, cutoffs, masks[name], graph_constraint)
        if sub is report:
            sub = MetricReport(report.count, report.recall_at, report.mrecall_at, report.acc, report.macc,
                               report.per_class_acc, report.per_class_recall)
        report.splits[name] = sub
        report.split_counts[name] = 0 if sub is None else sub.count
        _log.info(f'split {name}: {report.split_counts[name]} samples')
    return report
