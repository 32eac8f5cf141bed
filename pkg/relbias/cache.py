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
import logging
import os
import pickle
from typing import Optional

from .config import stable_digest
from .core import PriorDistribution
from .priors import SolverConfig, SolverTrace

_log = logging.getLogger(__name__)


Estimate = collections.namedtuple('Estimate', ['prior', 'trace'])


def estimate_key(zs_digest: str, pi_sg: PriorDistribution, solver: SolverConfig) -> str:
    """ Content key of one prior estimate: zero-shot table, counted prior and solver settings. """
    return stable_digest({'zs': zs_digest,
                          'pi_sg': [float(p) for p in pi_sg.probs],
                          'solver': solver.to_dict()})


class PriorCache:
    """ Estimated priors stored by content key, one pickle per key. """
    suffix = '.pickle'

    def __init__(self, folder: str):
        self.folder = folder

    def path(self, key: str) -> str:
        return os.path.join(self.folder, key + self.suffix)

    def load(self, key: str) -> Optional[Estimate]:
        path = self.path(key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, 'rb') as f:
                prior, trace = pickle.load(f)
            if not isinstance(prior, PriorDistribution) or not isinstance(trace, SolverTrace):
                raise TypeError(f"unexpected cache content in {path}")
        except Exception as err:
            _log.warning(f'dropping unreadable cache entry {path}: {err}')
            try:
                os.unlink(path)
            except OSError:
                pass
            return None
        _log.info(f'prior estimate {key} taken from cache')
        return Estimate(prior, trace)

    def store(self, key: str, prior: PriorDistribution, trace: SolverTrace) -> None:
        os.makedirs(self.folder, exist_ok=True)
        with open(self.path(key), 'wb') as f:
            pickle.dump((prior, trace), f)
