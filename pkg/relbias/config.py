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

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .core import DatasetError, ValidationError
from .metrics import ALL_SPLITS, DEFAULT_CUTOFFS, FrequencyBuckets
from .priors import SolverConfig, TargetMode

TAU_FIT = 'fit'
DEFAULT_TAU = 1.0


def _coerce(val: str):
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        pass
    if val.lower() in ('true', 'false'):
        return val.lower() == 'true'
    return val


class Config:
    """ Settings file as a mapping with attribute access.

    `*.json` files are read as one JSON object; anything else as
    `key = value` lines with `#` comments, numbers coerced.
    """
    def __init__(self, filepath: str):
        self._dict = {}
        self.filepath = filepath
        self.load(filepath)

    def load(self, filepath: str):
        self.clear()
        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError:
            raise DatasetError(f"failed to load config {filepath}") from None

        if filepath.endswith('.json'):
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{filepath}: invalid JSON: {err}") from None
            if not isinstance(doc, dict):
                raise DatasetError(f"{filepath}: config must be a JSON object")
        else:
            doc = {}
            for line in text.splitlines():
                line = line.strip()
                if line and not line.startswith('#') and '=' in line:
                    key, val = line.split('=', 1)
                    doc[key.strip()] = _coerce(val.strip())
        for key, val in doc.items():
            self._dict[key] = val
            setattr(self, key, val)

    def __len__(self) -> int:
        return len(self._dict)

    def __getitem__(self, key: str):
        return self._dict[key]

    def __contains__(self, key: str) -> bool:
        return key in self._dict

    def get(self, key: str, default=None):
        return self._dict.get(key, default)

    def clear(self) -> None:
        for key in self._dict:
            delattr(self, key)
        self._dict = {}

    def keys(self):
        return self._dict.keys()

    def values(self):
        return self._dict.values()

    def items(self):
        return self._dict.items()


def _as_tuple(val, kind) -> tuple:
    if isinstance(val, str):
        val = [v for v in val.split(',') if v.strip()]
    return tuple(kind(v.strip() if isinstance(v, str) else v) for v in val)


def _as_bool(val) -> bool:
    if isinstance(val, str):
        return val.strip().lower() in ('1', 'true', 'yes', 'on')
    return bool(val)


def _as_tau(val) -> Union[float, str]:
    if isinstance(val, str) and val.strip() == TAU_FIT:
        return TAU_FIT
    try:
        return float(val)
    except (TypeError, ValueError):
        raise ValidationError(f"tau must be a positive number or '{TAU_FIT}', got {val!r}") from None


SOLVER_KEYS = ('max_iters', 'learning_rate', 'grad_tol', 'init')


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str
    target: str = TargetMode.UNIFORM.value
    solver: SolverConfig = field(default_factory=SolverConfig)
    # None: the temperature recorded by the adjust stage, else DEFAULT_TAU
    tau_zs: Union[float, str, None] = None
    tau_sg: Union[float, str, None] = None
    scale: float = 1.0
    cutoffs: Tuple[int, ...] = DEFAULT_CUTOFFS
    splits: Tuple[str, ...] = ALL_SPLITS
    buckets: str = 'auto'
    graph_constraint: bool = True
    out_dir: str = 'out'
    seed: int = 0
    hash_check: bool = True

    @classmethod
    def build(cls, config_file: Optional[str] = None, **overrides) -> 'PipelineConfig':
        """ Defaults, then the config file, then `overrides` (None values are ignored). """
        settings: Dict[str, Any] = {}
        if config_file:
            settings.update(Config(config_file).items())
        settings.update({key: val for key, val in overrides.items() if val is not None})

        solver = dict(settings.pop('solver', None) or {})
        for key in SOLVER_KEYS:
            if key in settings:
                solver[key] = settings.pop(key)
        known = {f.name for f in fields(cls)}
        unknown = set(settings) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        if 'manifest' not in settings:
            raise ValidationError("config needs a manifest")

        kwargs = dict(settings)
        for key, kind in (('cutoffs', int), ('splits', str)):
            if key in kwargs:
                kwargs[key] = _as_tuple(kwargs[key], kind)
        for key in ('tau_zs', 'tau_sg'):
            if key in kwargs:
                kwargs[key] = _as_tau(kwargs[key])
        for key in ('graph_constraint', 'hash_check'):
            if key in kwargs:
                kwargs[key] = _as_bool(kwargs[key])
        for key, kind in (('scale', float), ('seed', int), ('buckets', str), ('target', str)):
            if key in kwargs:
                kwargs[key] = kind(kwargs[key])
        seed = int(kwargs.get('seed', 0))
        try:
            kwargs['solver'] = SolverConfig(seed=seed, **solver)
        except TypeError as err:
            raise ValidationError(f"bad solver settings: {err}") from None
        return cls(**kwargs)

    def target_mode(self) -> Tuple[TargetMode, Optional[str]]:
        mode, _, arg = self.target.partition(':')
        try:
            return TargetMode(mode), (arg or None)
        except ValueError:
            raise ValidationError(f"target must be uniform, training or file:<path>, got {self.target!r}") from None

    def frequency_buckets(self) -> Optional[FrequencyBuckets]:
        return FrequencyBuckets.parse(self.buckets)

    def validate(self) -> 'PipelineConfig':
        """ Check values and referenced files; returns a copy with sorted cutoffs. """
        if not os.path.isfile(self.manifest):
            raise DatasetError(f"missing file {self.manifest}")
        mode, arg = self.target_mode()
        if mode == TargetMode.FILE:
            if not arg:
                raise ValidationError("file target needs a path: file:<path>")
            if not os.path.isfile(arg):
                raise DatasetError(f"missing file {arg}")
        for name in ('tau_zs', 'tau_sg'):
            tau = getattr(self, name)
            if tau is not None and tau != TAU_FIT and not tau > 0:
                raise ValidationError(f"{name} must be positive, got {tau}")
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ValidationError(f"cutoffs must be >= 1, got {list(self.cutoffs)}")
        unknown = set(self.splits) - set(ALL_SPLITS)
        if unknown:
            raise ValidationError(f"unknown splits {sorted(unknown)}")
        self.frequency_buckets()
        return replace(self, cutoffs=tuple(sorted(set(self.cutoffs))))

    def to_dict(self) -> Dict[str, Any]:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc['solver'] = self.solver.to_dict()
        doc['cutoffs'] = list(self.cutoffs)
        doc['splits'] = list(self.splits)
        return doc

    def digest(self) -> str:
        """ Short SHA-256 of the canonical JSON of the settings that shape the outputs.

        The manifest location, the output directory and the hash-check
        switch are left out; the data itself is hashed separately.
        """
        doc = self.to_dict()
        doc.pop('out_dir')
        doc.pop('hash_check')
        doc.pop('manifest')
        return stable_digest(doc)


def stable_digest(doc: Mapping) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]
