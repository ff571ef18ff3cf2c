"""OOD detection metrics and calibration error.

Scores are OOD-ness: higher means more likely out-of-distribution (entropy,
for instance). ID samples are the positive class for ROC curves and, by
default, for precision-recall. Everything is computed in float64.
"""

import math
from dataclasses import astuple, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError

ID = "id"
OOD = "ood"
DEFAULT_BINS = 15


def _scores(values, what):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{what} scores are empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} scores must be finite")
    return arr


def tnr_at_tpr(id_scores, ood_scores, level=0.95):
    """Fraction of OOD scores above the threshold that keeps ``level`` of ID.

    The threshold is the ceil(level * N_id)-th smallest ID score, i.e. the
    smallest value whose ID fraction at or below it reaches ``level``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    ids = np.sort(_scores(id_scores, "ID"))
    ood = _scores(ood_scores, "OOD")
    # the small slack keeps 0.95 * 20 from rounding up to 20
    rank = max(1, math.ceil(level * len(ids) - 1e-9))
    tau = ids[rank - 1]
    return float(np.mean(ood > tau))


def auroc(id_scores, ood_scores):
    """P(OOD score > ID score) with ties counted one half (Mann-Whitney U)."""
    ids = _scores(id_scores, "ID")
    ood = _scores(ood_scores, "OOD")
    ranks = rankdata(np.concatenate([ids, ood]))
    n_id, n_ood = len(ids), len(ood)
    u = ranks[n_id:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


@dataclass(frozen=True)
class RocCurve:
    """Points ordered from the strictest threshold to the loosest.

    A sample is called ID when its score is <= threshold, so TPR is the ID
    fraction accepted and FPR the OOD fraction accepted.
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray

    def area(self):
        return float(np.trapezoid(self.tpr, self.fpr))


def roc_curve(id_scores, ood_scores):
    ids = _scores(id_scores, "ID")
    ood = _scores(ood_scores, "OOD")
    cuts = np.unique(np.concatenate([ids, ood]))
    ids.sort()
    ood.sort()
    tpr = np.searchsorted(ids, cuts, side="right") / len(ids)
    fpr = np.searchsorted(ood, cuts, side="right") / len(ood)
    return RocCurve(
        np.concatenate([[-np.inf], cuts]),
        np.concatenate([[0.0], tpr]),
        np.concatenate([[0.0], fpr]),
    )


def aupr(id_scores, ood_scores, positive=ID):
    """Average precision: sum over recall steps of (delta recall) * precision.

    Samples are swept in decreasing positive-ness; tied scores enter as one
    step. With ``positive="id"`` positive-ness is the negated score.
    """
    ids = _scores(id_scores, "ID")
    ood = _scores(ood_scores, "OOD")
    if positive == ID:
        pos, neg = -ids, -ood
    elif positive == OOD:
        pos, neg = ood, ids
    else:
        raise ValueError(f"positive must be 'id' or 'ood', got {positive!r}")
    cuts = np.unique(np.concatenate([pos, neg]))[::-1]
    pos = np.sort(pos)
    neg = np.sort(neg)
    tp = len(pos) - np.searchsorted(pos, cuts, side="left")
    fp = len(neg) - np.searchsorted(neg, cuts, side="left")
    recall = tp / len(pos)
    precision = tp / (tp + fp)
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * precision))


@dataclass(frozen=True)
class CalibrationBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray


def calibration_bins(confidences, correct, bins=DEFAULT_BINS):
    """Equal-width bins (lo, hi] on [0, 1]; a confidence of exactly 0 joins the first bin.

    Empty bins report NaN mean confidence and accuracy.
    """
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hits = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.shape != hits.shape:
        raise ShapeError(f"{len(conf)} confidences but {len(hits)} correctness flags")
    if bins < 1:
        raise ValueError("need at least one bin")
    if ((conf < 0) | (conf > 1) | ~np.isfinite(conf)).any():
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.bincount(idx, conf, bins) / counts
        mean_acc = np.bincount(idx, hits, bins) / counts
    return CalibrationBins(np.linspace(0.0, 1.0, bins + 1), counts, mean_conf, mean_acc)


def ece(confidences, correct, bins=DEFAULT_BINS):
    cb = calibration_bins(confidences, correct, bins)
    total = cb.counts.sum()
    if total == 0:
        raise ValueError("no samples")
    used = cb.counts > 0
    gaps = np.abs(cb.accuracy[used] - cb.confidence[used])
    return float(np.sum(cb.counts[used] / total * gaps))


@dataclass(frozen=True)
class MetricReport:
    tnr_at_tpr95: float
    auroc: float
    aupr: float
    ece: float = float("nan")

    def as_tuple(self):
        return astuple(self)


def summarize(id_scores, ood_scores, confidences=None, correct=None, bins=DEFAULT_BINS):
    """All four metrics; ECE is NaN when no classification outputs are given."""
    calib = float("nan")
    if confidences is not None:
        calib = ece(confidences, correct, bins)
    return MetricReport(
        tnr_at_tpr(id_scores, ood_scores, 0.95),
        auroc(id_scores, ood_scores),
        aupr(id_scores, ood_scores),
        calib,
    )
