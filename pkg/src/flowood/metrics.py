"""Threshold metrics for OOD detection. Higher score always means "more ID".

* ``auroc``: P(ID score > OOD score), ties counted one half.
* ``fpr_at_tpr``: under the default ``"ood-positive"`` convention OOD is the positive
  class, flagged when ``score <= tau``. ``tau`` is the smallest threshold that
  reaches the target OOD recall, and the result is the fraction of ID samples
  with ``score <= tau``. The ``"openood"`` convention swaps the roles: ID is
  positive, flagged when ``score >= tau``.
* ``aupr``: average precision with tied scores grouped into one threshold step.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ArgumentError

METRIC_NAMES = ("fpr", "auroc", "aupr_in", "aupr_out")
FPR_CONVENTIONS = ("ood-positive", "openood")


def _as_scores(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ArgumentError(f"{what} scores are empty")
    if not np.isfinite(x).all():
        raise ArgumentError(f"{what} scores contain non-finite values")
    return x


def group_scores(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray, int]:
    """Map every score to the rank of its distinct value (ascending)."""
    id_scores = _as_scores(id_scores, "ID")
    ood_scores = _as_scores(ood_scores, "OOD")
    _, inverse = np.unique(np.concatenate([id_scores, ood_scores]), return_inverse=True)
    inverse = inverse.ravel().astype(np.int64)
    n_groups = int(inverse.max()) + 1
    return inverse[: id_scores.size], inverse[id_scores.size :], n_groups


def _ood_positive(convention: str) -> bool:
    if convention not in FPR_CONVENTIONS:
        raise ArgumentError(f"fpr convention must be one of {FPR_CONVENTIONS}, got {convention!r}")
    return convention == "ood-positive"


def _check_tpr(tpr_target: float) -> None:
    if not 0.0 < tpr_target <= 1.0:
        raise ArgumentError(f"tpr_target must be in (0, 1], got {tpr_target}")


def ood_metrics(id_scores, ood_scores, tpr_target: float = 0.95, fpr_convention: str = "ood-positive") -> dict[str, float]:
    """All four metrics from one sort."""
    _check_tpr(tpr_target)
    positive = _ood_positive(fpr_convention)
    id_g, ood_g, n_groups = group_scores(id_scores, ood_scores)
    id_cnt = np.bincount(id_g, minlength=n_groups).astype(np.float64)
    ood_cnt = np.bincount(ood_g, minlength=n_groups).astype(np.float64)
    values = kernels.metrics_from_counts(id_cnt, ood_cnt, tpr_target, positive)
    return dict(zip(METRIC_NAMES, (float(v) for v in values)))


def auroc(id_scores, ood_scores) -> float:
    return ood_metrics(id_scores, ood_scores)["auroc"]


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95, fpr_convention: str = "ood-positive") -> float:
    return ood_metrics(id_scores, ood_scores, tpr_target, fpr_convention)["fpr"]


def aupr(pos_scores, neg_scores, positive_is_high: bool = True) -> float:
    """Average precision of ``pos`` against ``neg``.

    With ``positive_is_high`` the positives are expected to score high (AUPR_IN);
    otherwise low (AUPR_OUT, i.e. AP on negated scores).
    """
    if positive_is_high:
        return ood_metrics(pos_scores, neg_scores)["aupr_in"]
    return ood_metrics(neg_scores, pos_scores)["aupr_out"]
