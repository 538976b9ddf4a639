"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment variable
``FLOWOOD_DISABLE_NUMBA`` is unset or "0". Both paths are always importable as
``nb_<name>`` / ``np_<name>`` so they can be tested and benchmarked side by side;
the public names (``midranks``, ``adam_update``, ...) point at the selected one.

Score-sweep kernels operate on *tie groups*: all scores are sorted once, equal
values share a group id, and every metric is then a pass over per-group counts
of ID and OOD samples. Bootstrap replicates reuse the grouping and only change
the counts, so a replicate costs O(n) instead of a fresh sort.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("FLOWOOD_DISABLE_NUMBA", "0") in ("", "0")
BACKEND = "numba" if USE_NUMBA else "numpy"

_TPR_SLACK = 1e-9


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True, error_model="numpy")(fn)


# --------------------------------------------------------------------------- #
# midranks
# --------------------------------------------------------------------------- #


def _midranks_loop(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


nb_midranks = _njit(_midranks_loop)


def np_midranks(x: np.ndarray) -> np.ndarray:
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts).astype(np.float64)
    lower = upper - counts + 1.0
    return (0.5 * (lower + upper))[inverse.ravel()]


# --------------------------------------------------------------------------- #
# metrics from grouped counts
# --------------------------------------------------------------------------- #


def _metrics_loop(id_cnt, ood_cnt, tpr_target, ood_positive):
    """Return (fpr, auroc, aupr_in, aupr_out) from ascending per-group counts."""
    g_n = id_cnt.shape[0]
    n_id = 0.0
    n_ood = 0.0
    for g in range(g_n):
        n_id += id_cnt[g]
        n_ood += ood_cnt[g]

    auc = 0.0
    below = 0.0
    for g in range(g_n):
        auc += id_cnt[g] * (below + 0.5 * ood_cnt[g])
        below += ood_cnt[g]
    auc /= n_id * n_ood

    fpr = 1.0
    if ood_positive:
        need = tpr_target * n_ood - _TPR_SLACK * n_ood
        c_ood = 0.0
        c_id = 0.0
        for g in range(g_n):
            c_ood += ood_cnt[g]
            c_id += id_cnt[g]
            if c_ood >= need:
                fpr = c_id / n_id
                break
    else:
        need = tpr_target * n_id - _TPR_SLACK * n_id
        c_ood = 0.0
        c_id = 0.0
        for g in range(g_n - 1, -1, -1):
            c_ood += ood_cnt[g]
            c_id += id_cnt[g]
            if c_id >= need:
                fpr = c_ood / n_ood
                break

    ap_in = 0.0
    tp = 0.0
    fp = 0.0
    for g in range(g_n - 1, -1, -1):
        tp += id_cnt[g]
        fp += ood_cnt[g]
        if id_cnt[g] > 0:
            ap_in += (tp / (tp + fp)) * (id_cnt[g] / n_id)

    ap_out = 0.0
    tp = 0.0
    fp = 0.0
    for g in range(g_n):
        tp += ood_cnt[g]
        fp += id_cnt[g]
        if ood_cnt[g] > 0:
            ap_out += (tp / (tp + fp)) * (ood_cnt[g] / n_ood)

    return fpr, auc, ap_in, ap_out


nb_metrics_from_counts = _njit(_metrics_loop)


def np_metrics_from_counts(id_cnt, ood_cnt, tpr_target, ood_positive):
    id_cnt = np.asarray(id_cnt, dtype=np.float64)
    ood_cnt = np.asarray(ood_cnt, dtype=np.float64)
    n_id = id_cnt.sum()
    n_ood = ood_cnt.sum()

    ood_below = np.cumsum(ood_cnt) - ood_cnt
    auc = float(np.sum(id_cnt * (ood_below + 0.5 * ood_cnt)) / (n_id * n_ood))

    if ood_positive:
        c_pos = np.cumsum(ood_cnt)
        c_neg = np.cumsum(id_cnt)
        hit = np.flatnonzero(c_pos >= tpr_target * n_ood - _TPR_SLACK * n_ood)
        fpr = float(c_neg[hit[0]] / n_id) if hit.size else 1.0
    else:
        c_pos = np.cumsum(id_cnt[::-1])
        c_neg = np.cumsum(ood_cnt[::-1])
        hit = np.flatnonzero(c_pos >= tpr_target * n_id - _TPR_SLACK * n_id)
        fpr = float(c_neg[hit[0]] / n_ood) if hit.size else 1.0

    tp = np.cumsum(id_cnt[::-1])
    fp = np.cumsum(ood_cnt[::-1])
    ap_in = float(np.sum(np.where(id_cnt[::-1] > 0, tp / np.maximum(tp + fp, 1e-300), 0.0) * id_cnt[::-1]) / n_id)

    tp = np.cumsum(ood_cnt)
    fp = np.cumsum(id_cnt)
    ap_out = float(np.sum(np.where(ood_cnt > 0, tp / np.maximum(tp + fp, 1e-300), 0.0) * ood_cnt) / n_ood)
    return fpr, auc, ap_in, ap_out


# --------------------------------------------------------------------------- #
# bootstrap replicates
# --------------------------------------------------------------------------- #


def _bootstrap_loop(id_group, ood_group, n_groups, id_idx, ood_idx, tpr_target, ood_positive):
    reps = id_idx.shape[0]
    out = np.empty((reps, 4), dtype=np.float64)
    id_cnt = np.zeros(n_groups, dtype=np.float64)
    ood_cnt = np.zeros(n_groups, dtype=np.float64)
    for r in range(reps):
        id_cnt[:] = 0.0
        ood_cnt[:] = 0.0
        for k in range(id_idx.shape[1]):
            id_cnt[id_group[id_idx[r, k]]] += 1.0
        for k in range(ood_idx.shape[1]):
            ood_cnt[ood_group[ood_idx[r, k]]] += 1.0
        fpr, auc, ap_in, ap_out = _metrics_kernel(id_cnt, ood_cnt, tpr_target, ood_positive)
        out[r, 0] = fpr
        out[r, 1] = auc
        out[r, 2] = ap_in
        out[r, 3] = ap_out
    return out


if HAVE_NUMBA:
    _metrics_kernel = nb_metrics_from_counts
    nb_bootstrap_metrics = _njit(_bootstrap_loop)
else:  # pragma: no cover
    _metrics_kernel = _metrics_loop
    nb_bootstrap_metrics = _bootstrap_loop


def np_bootstrap_metrics(id_group, ood_group, n_groups, id_idx, ood_idx, tpr_target, ood_positive):
    reps = id_idx.shape[0]
    out = np.empty((reps, 4), dtype=np.float64)
    for r in range(reps):
        id_cnt = np.bincount(id_group[id_idx[r]], minlength=n_groups).astype(np.float64)
        ood_cnt = np.bincount(ood_group[ood_idx[r]], minlength=n_groups).astype(np.float64)
        out[r] = np_metrics_from_counts(id_cnt, ood_cnt, tpr_target, ood_positive)
    return out


# --------------------------------------------------------------------------- #
# Adam
# --------------------------------------------------------------------------- #


def _adam_loop(params, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    # one division per element; scalars hoisted identically in np_adam_update
    step = lr / bc1
    inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
    for i in range(params.shape[0]):
        g = np.float64(grad[i])
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * (g * g)
        m[i] = mi
        v[i] = vi
        params[i] = params[i] - step * mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps)


nb_adam_update = _njit(_adam_loop)


def np_adam_update(params, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    step = lr / bc1
    inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
    g = grad.astype(np.float64)
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    params[...] = params - step * m / (np.sqrt(v) * inv_sqrt_bc2 + eps)


if USE_NUMBA:
    midranks = nb_midranks
    metrics_from_counts = nb_metrics_from_counts
    bootstrap_metrics = nb_bootstrap_metrics
    adam_update = nb_adam_update
else:
    midranks = np_midranks
    metrics_from_counts = np_metrics_from_counts
    bootstrap_metrics = np_bootstrap_metrics
    adam_update = np_adam_update
