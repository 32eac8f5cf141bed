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

File formats: logit / probability tables (TSV), prior files (JSON),
training triplet inventories (TSV) and dataset manifests (JSON).
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (Dataset, DatasetError, PriorDistribution, PriorSource, RelationLabelSpace,
                   Triplet, ValidationError)

_log = logging.getLogger(__name__)

MAGIC = '#relbias-logits'
FORMAT_VERSION = 'v1'
META_COLUMNS = ('sample_id', 'image_id', 'subject_class', 'object_class', 'gt_label')
VALUES_LOGITS = 'logits'
VALUES_PROBS = 'probs'


def format_float(value: float) -> str:
    """ Shortest text that parses back to the identical double. """
    return repr(float(value))


@dataclass(frozen=True, eq=False)
class LogitTable:
    """ One branch's per-sample values as stored in a TSV table.

    `values` has k+1 columns (index 0 = background) when `background`
    is set, k columns otherwise.
    """
    k: int
    background: bool
    sample_ids: Tuple[str, ...]
    image_ids: Tuple[str, ...]
    subject_class: np.ndarray
    object_class: np.ndarray
    gt_label: np.ndarray
    values: np.ndarray
    kind: str = VALUES_LOGITS
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.k + 1 if self.background else self.k

    @property
    def column_names(self) -> List[str]:
        prefix = 'p' if self.kind == VALUES_PROBS else 'l'
        first = 0 if self.background else 1
        return list(META_COLUMNS) + [f'{prefix}{c}' for c in range(first, self.k + 1)]

    def header(self) -> str:
        tokens = [f'{MAGIC} {FORMAT_VERSION}', f'k={self.k}', f'background={int(self.background)}']
        if self.kind != VALUES_LOGITS:
            tokens.append(f'values={self.kind}')
        tokens += [f'{key}={val}' for key, val in self.meta.items()]
        return '\t'.join(tokens)

    @classmethod
    def from_dataset(cls, ds: Dataset, values: np.ndarray, background: bool,
                     kind: str = VALUES_LOGITS, meta: Optional[Dict[str, str]] = None) -> 'LogitTable':
        return cls(ds.k, background, ds.sample_ids, ds.image_ids, ds.subject_class, ds.object_class,
                   ds.gt_label, np.asarray(values, dtype=np.float64), kind, dict(meta or {}))


def _parse_header(line: str, path: str) -> Tuple[int, bool, str, Dict[str, str]]:
    tokens = line.rstrip('\n').split('\t')
    if tokens[0] != f'{MAGIC} {FORMAT_VERSION}':
        raise DatasetError(f"{path}: not a {MAGIC} {FORMAT_VERSION} table")
    fields = {}
    for token in tokens[1:]:
        if '=' not in token:
            raise DatasetError(f"{path}: malformed header token {token!r}")
        key, val = token.split('=', 1)
        fields[key] = val
    try:
        k = int(fields.pop('k'))
        background = fields.pop('background')
    except KeyError as err:
        raise DatasetError(f"{path}: header lacks {err.args[0]}") from None
    except ValueError:
        raise DatasetError(f"{path}: header k is not an integer") from None
    if background not in ('0', '1'):
        raise DatasetError(f"{path}: background flag must be 0 or 1")
    kind = fields.pop('values', VALUES_LOGITS)
    if kind not in (VALUES_LOGITS, VALUES_PROBS):
        raise DatasetError(f"{path}: unknown values kind {kind!r}")
    return k, background == '1', kind, fields


def _open_text(path: str, mode: str = 'r'):
    try:
        return open(path, mode, encoding='utf-8', newline='\n')
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None
    except OSError as err:
        raise DatasetError(f"cannot open {path}: {err}") from None


def read_logit_table(path: str) -> LogitTable:
    with _open_text(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    k, background, kind, meta = _parse_header(lines[0], path)
    width = k + 1 if background else k

    sample_ids, image_ids, subj, obj, labels, rows = [], [], [], [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        cols = line.split('\t')
        if len(cols) != len(META_COLUMNS) + width:
            raise DatasetError(f"{path}:{lineno}: expected {width} values for k={k}, "
                               f"got {len(cols) - len(META_COLUMNS)}")
        sid = cols[0]
        try:
            subj.append(int(cols[2]))
            obj.append(int(cols[3]))
            labels.append(int(cols[4]))
            row = [float(v) for v in cols[5:]]
        except ValueError as err:
            raise DatasetError(f"{path}:{lineno}: {err}") from None
        if not all(math.isfinite(v) for v in row):
            raise DatasetError(f"non-finite logit at sample_id {sid}")
        sample_ids.append(sid)
        image_ids.append(cols[1])
        rows.append(row)

    values = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    _log.info(f'read {len(rows)} rows (k={k}, background={int(background)}) from {path}')
    return LogitTable(k, background, tuple(sample_ids), tuple(image_ids), np.array(subj, dtype=np.int64),
                      np.array(obj, dtype=np.int64), np.array(labels, dtype=np.int64), values, kind, meta)


def write_logit_table(path: str, table: LogitTable) -> None:
    if table.values.shape != (len(table.sample_ids), table.width):
        raise ValidationError(f"table values shape {table.values.shape} does not match "
                              f"{len(table.sample_ids)} x {table.width}")
    with _open_text(path, 'w') as f:
        f.write(table.header() + '\n')
        f.write('\t'.join(table.column_names) + '\n')
        for i, sid in enumerate(table.sample_ids):
            meta = (sid, table.image_ids[i], str(int(table.subject_class[i])),
                    str(int(table.object_class[i])), str(int(table.gt_label[i])))
            f.write('\t'.join(meta + tuple(format_float(v) for v in table.values[i])) + '\n')


# ---------------------------------------------------------------------------
# priors

def prior_to_json(prior: PriorDistribution, meta: Optional[Dict[str, str]] = None) -> str:
    doc = {'k': prior.k, 'probs': [float(p) for p in prior.probs], 'source': prior.source.value}
    doc.update(meta or {})
    return json.dumps(doc, indent=1) + '\n'


def write_prior(path: str, prior: PriorDistribution, meta: Optional[Dict[str, str]] = None) -> None:
    with _open_text(path, 'w') as f:
        f.write(prior_to_json(prior, meta))


def read_prior(path: str, k: Optional[int] = None, source: Optional[PriorSource] = None) -> PriorDistribution:
    """ Load a prior file. The stored source is kept unless `source` overrides it. """
    with _open_text(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as err:
            raise DatasetError(f"{path}: invalid JSON: {err}") from None
    try:
        probs = doc['probs']
        declared = int(doc['k'])
    except (KeyError, TypeError, ValueError):
        raise DatasetError(f"{path}: prior file needs 'k' and 'probs'") from None
    if len(probs) != declared:
        raise DatasetError(f"{path}: k={declared} but {len(probs)} probabilities")
    if k is not None and declared != k:
        raise DatasetError(f"{path}: prior has k={declared}, expected {k}")
    if source is None:
        try:
            source = PriorSource(doc.get('source', PriorSource.FILE.value))
        except ValueError:
            source = PriorSource.FILE
    try:
        return PriorDistribution(np.array(probs, dtype=np.float64), source)
    except (ValidationError, TypeError, ValueError) as err:
        raise DatasetError(f"{path}: {err}") from None


# ---------------------------------------------------------------------------
# triplet inventory

def read_triplets(path: str) -> FrozenSet[Triplet]:
    triplets = set()
    with _open_text(path) as f:
        for lineno, line in enumerate(f.read().splitlines(), start=1):
            if not line or line.startswith('#') or line.startswith('subject_class'):
                continue
            cols = line.split('\t')
            try:
                subj, rel, obj = (int(c) for c in cols)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: expected subject_class, relation, object_class") from None
            triplets.add((subj, rel, obj))
    return frozenset(triplets)


def write_triplets(path: str, triplets: Iterable[Triplet]) -> None:
    with _open_text(path, 'w') as f:
        f.write('subject_class\trelation\tobject_class\n')
        for subj, rel, obj in sorted(triplets):
            f.write(f'{subj}\t{rel}\t{obj}\n')


# ---------------------------------------------------------------------------
# manifests

def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def read_manifest(manifest_path: str) -> Dict[str, object]:
    with _open_text(manifest_path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as err:
            raise DatasetError(f"{manifest_path}: invalid JSON: {err}") from None
    for key in ('zs_logits', 'sg_logits'):
        if key not in doc:
            raise DatasetError(f"{manifest_path}: manifest lacks {key!r}")
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    doc = dict(doc)
    for key in ('zs_logits', 'sg_logits', 'train_triplets'):
        if doc.get(key):
            doc[key] = _resolve(base_dir, doc[key])
    return doc


def _join(zs: LogitTable, sg: LogitTable, zs_path: str, sg_path: str) -> List[int]:
    """ Row order of `sg` matching the rows of `zs` by sample_id. """
    sg_rows = {sid: i for i, sid in enumerate(sg.sample_ids)}
    if len(sg_rows) != len(sg.sample_ids):
        raise DatasetError(f"{sg_path}: duplicate sample_id")
    if len(set(zs.sample_ids)) != len(zs.sample_ids):
        raise DatasetError(f"{zs_path}: duplicate sample_id")
    orphans = set(zs.sample_ids) ^ set(sg_rows)
    if orphans:
        sid = min(orphans)
        where = zs_path if sid in set(zs.sample_ids) else sg_path
        raise DatasetError(f"sample_id {sid} present only in {where}")

    order = []
    for i, sid in enumerate(zs.sample_ids):
        j = sg_rows[sid]
        if (zs.image_ids[i], zs.subject_class[i], zs.object_class[i], zs.gt_label[i]) != \
                (sg.image_ids[j], sg.subject_class[j], sg.object_class[j], sg.gt_label[j]):
            raise DatasetError(f"sample_id {sid}: metadata differs between {zs_path} and {sg_path}")
        order.append(j)
    return order


def load_dataset(manifest_path: str) -> Dataset:
    """ Read both logit tables named by a manifest and join them on sample_id.

    The result is validated and in canonical order (ascending sample_id).
    """
    doc = read_manifest(manifest_path)
    zs_path, sg_path = doc['zs_logits'], doc['sg_logits']
    zs = read_logit_table(zs_path)
    sg = read_logit_table(sg_path)

    if zs.background or zs.width != zs.k:
        raise DatasetError(f"{zs_path}: zero-shot table must have background=0")
    if not sg.background:
        raise DatasetError(f"{sg_path}: scene-graph table must have background=1")
    if zs.k != sg.k:
        raise DatasetError(f"dimension mismatch: {zs_path} has k={zs.k}, {sg_path} has k={sg.k}")
    declared = doc.get('k')
    if declared is not None and int(declared) != zs.k:
        raise DatasetError(f"dimension mismatch: manifest declares k={declared}, tables have k={zs.k}")

    order = _join(zs, sg, zs_path, sg_path)
    names = doc.get('class_names')
    try:
        space = RelationLabelSpace(zs.k, tuple(names) if names else None)
    except ValidationError as err:
        raise DatasetError(f"{manifest_path}: {err}") from None
    inventory = read_triplets(doc['train_triplets']) if doc.get('train_triplets') else None

    ds = Dataset(space, zs.sample_ids, zs.image_ids, zs.subject_class, zs.object_class, zs.gt_label,
                 zs.values, sg.values[order] if order else np.zeros((0, zs.k + 1)),
                 gt_triplet_inventory=inventory, source=os.path.abspath(manifest_path))
    ds = ds.canonical()
    _log.info(f'loaded {len(ds)} samples (k={ds.k}) from {manifest_path}')
    return ds


def save_dataset(ds: Dataset, manifest_path: str, zs_name: str = 'zs.tsv', sg_name: str = 'sg.tsv',
                 triplets_name: str = 'train_triplets.tsv') -> None:
    """ Write a dataset as manifest plus logit tables next to it. """
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(base_dir, exist_ok=True)
    write_logit_table(os.path.join(base_dir, zs_name), LogitTable.from_dataset(ds, ds.zs_logits, False))
    write_logit_table(os.path.join(base_dir, sg_name), LogitTable.from_dataset(ds, ds.sg_logits, True))
    doc = {'k': ds.k, 'zs_logits': zs_name, 'sg_logits': sg_name}
    if ds.space.class_names is not None:
        doc['class_names'] = list(ds.space.class_names)
    if ds.gt_triplet_inventory is not None:
        write_triplets(os.path.join(base_dir, triplets_name), ds.gt_triplet_inventory)
        doc['train_triplets'] = triplets_name
    with _open_text(manifest_path, 'w') as f:
        f.write(json.dumps(doc, indent=1) + '\n')


def file_digest(paths: Sequence[str]) -> str:
    """ SHA-256 over the bytes of the given files, first 16 hex chars. """
    sha = hashlib.sha256()
    for path in paths:
        try:
            with open(path, 'rb') as f:
                for chunk in iter(lambda: f.read(1 << 20), b''):
                    sha.update(chunk)
        except OSError as err:
            raise DatasetError(f"cannot hash {path}: {err}") from None
    return sha.hexdigest()[:16]


def dataset_digest(manifest_path: str) -> str:
    doc = read_manifest(manifest_path)
    return file_digest([doc['zs_logits'], doc['sg_logits']])
