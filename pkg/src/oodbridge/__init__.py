"""Entropy-based OOD detection with soft-label training on corrupted images.

Modules: ``corruptions`` (the 75 image transformations), ``softlabel``
(accuracy tables, soft targets and the mixed sampler), ``nnet`` (the
classifier, losses and scores), ``training``, ``metrics``, ``data_io`` and
``cli``.
"""

from .corruptions import CorruptionSpec, SeverityParams, apply_corruption, corrupt_dataset, list_corruptions
from .data_io import LabeledDataset, synth_dataset
from .metrics import MetricReport, aupr, auroc, ece, summarize, tnr_at_tpr
from .nnet import Classifier, entropy_score, grad_check, msp_score, soft_cross_entropy
from .softlabel import AccuracyTable, compute_accuracy_table, draw_training_sample, make_soft_label
from .training import TrainConfig, train

__version__ = "0.1.0"
