"""Evaluation metrics (AUC, TPR at a fixed FPR) and damage-statistic correlations."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_TARGET_FPR = 1e-3


class MetricError(ValueError):
    pass


@dataclass
class MetricsRecord:
    auc: float
    tpr_at_fpr: float
    target_fpr: float
    mean_loss: float
    accuracy: float
    n: int

    def as_dict(self):
        return asdict(self)


@dataclass
class VShapeStats:
    corr_raw: float
    corr_abs: float
    n_params: int
    fraction_nonneg_mean: float
    degenerate: bool = False


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    if not np.all((labels == 0) | pos):
        raise MetricError("labels must be 0/1")
    if pos.all() or not pos.any():
        raise MetricError("both classes must be present")
    return scores, pos


def _tie_groups(scores, pos):
    """Cumulative (tp, fp) counts after each group of tied scores, highest score first."""
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    return tp[last], fp[last]


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via a sorted sweep with trapezoids over tie groups."""
    scores, pos = _prepare(scores, labels)
    tp, fp = _tie_groups(scores, pos)
    tp_prev = np.r_[0, tp[:-1]]
    fp_step = np.diff(np.r_[0, fp])
    # Integer-valued sums keep the result exact for moderate n.
    area2 = np.sum(fp_step * (tp_prev + tp))
    return float(area2 / (2.0 * pos.sum() * (~pos).sum()))


def tpr_at_fpr(scores, labels, target_fpr=DEFAULT_TARGET_FPR) -> float:
    """Highest TPR over thresholds ``score >= t`` whose empirical FPR stays <= target.

    No interpolation between operating points.
    """
    if not 0.0 < target_fpr < 1.0:
        raise MetricError("target_fpr must be in (0, 1)")
    scores, pos = _prepare(scores, labels)
    tp, fp = _tie_groups(scores, pos)
    ok = fp / (~pos).sum() <= target_fpr
    if not ok.any():
        return 0.0
    return float(tp[ok].max() / pos.sum())


def evaluate_scores(scores, labels, losses, target_fpr=DEFAULT_TARGET_FPR) -> MetricsRecord:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return MetricsRecord(
        auc=roc_auc(scores, labels),
        tpr_at_fpr=tpr_at_fpr(scores, labels, target_fpr),
        target_fpr=target_fpr,
        mean_loss=float(np.mean(losses)),
        accuracy=float(np.mean((scores >= 0.5) == (labels == 1))),
        n=int(scores.size),
    )


def pearson(x, y) -> float:
    """Pearson correlation; zero-variance input returns 0.0 (see ``is_degenerate``)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MetricError("length mismatch")
    if x.size < 3:
        raise MetricError("pearson needs at least 3 points")
    if is_degenerate(x, y):
        return 0.0
    xc, yc = x - x.mean(), y - y.mean()
    r = np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    return float(np.clip(r, -1.0, 1.0))


def is_degenerate(x, y) -> bool:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return bool(np.ptp(x) == 0 or np.ptp(y) == 0)


def v_shape_stats(report) -> VShapeStats:
    """Correlation between per-parameter mean and SD of curvature-times-theta-squared."""
    mean, sd = report.flat_stats()
    if mean is None or sd is None:
        raise MetricError("report carries no mean/sd statistics")
    if mean.size < 3:
        raise MetricError("need at least 3 parameters")
    degenerate = is_degenerate(mean, sd) or is_degenerate(np.abs(mean), sd)
    return VShapeStats(
        corr_raw=pearson(mean, sd),
        corr_abs=pearson(np.abs(mean), sd),
        n_params=int(mean.size),
        fraction_nonneg_mean=float(np.mean(mean >= 0)),
        degenerate=degenerate,
    )


def evaluate_model(model, dataset, target_fpr=DEFAULT_TARGET_FPR) -> MetricsRecord:
    """Eval-mode forward pass over ``dataset`` followed by :func:`evaluate_scores`."""
    from prunekit.nn import forward, loss

    scores = forward(model, dataset.features, "eval")
    labels = np.asarray(dataset.labels)
    losses = loss(scores, labels.astype(scores.dtype), model.spec.loss_kind)
    return evaluate_scores(scores, labels, losses, target_fpr)
