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

__version__ = '0.1.0'

from .core import (BACKGROUND_ID, Dataset, DatasetError, IncompatibleReportsError, PriorDistribution,
                   PriorSource, RelationLabelSpace, RelationSample, RelbiasError, StageError, ValidationError,
                   filter_nonbackground)
from .priors import SolverConfig, SolverTrace, count_prior, estimate_prior, target_prior
from .adjust import AdjustmentSpec, adjust_logits, calibrated_probs, fit_tau
from .ensemble import EnsembleOutput, certainty_weight, compose_full, fuse_relations
from .metrics import MetricReport, Predictions, SceneGroundTruth, classification_acc, recall_at_k, split_report
from .tables import load_dataset, save_dataset
from .config import Config, PipelineConfig
from .pipeline import diff_reports, run_pipeline
