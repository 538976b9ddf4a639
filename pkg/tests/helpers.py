"""Shared builders for tests."""

from unittest.mock import patch

import numpy as np

from flowood.flow import FlowModel, MLPNet


def perturbed_model(dim, hidden=(16, 32, 16), seed=0, dtype=np.float32, n_blocks=4, out_scale=0.1):
    """Flow with every parameter moved away from the identity start, ActNorm marked initialized."""
    model = FlowModel.create(dim, n_blocks, hidden, seed=seed, dtype=dtype)
    rng = np.random.default_rng([seed, 7])
    last = f"W{len(hidden)}", f"b{len(hidden)}"
    for name, v in model.named_parameters().items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("actnorm.log_scale"):
            v[...] = rng.uniform(-0.3, 0.3, v.shape)
        elif name.endswith("actnorm.bias"):
            v[...] = rng.normal(0.0, 0.3, v.shape)
        elif leaf in last:
            v[...] = rng.normal(0.0, out_scale, v.shape)
    model.actnorm_initialized = True
    return model


def identity_model(dim, hidden=(4, 8, 4), n_blocks=4, dtype=np.float32):
    model = FlowModel.create(dim, n_blocks, hidden, dtype=dtype)
    model.actnorm_initialized = True
    return model


def brute_auroc(id_s, ood_s):
    id_s = np.asarray(id_s, float)[:, None]
    ood_s = np.asarray(ood_s, float)[None, :]
    return float(((id_s > ood_s) + 0.5 * (id_s == ood_s)).mean())


def brute_fpr(id_s, ood_s, tpr=0.95):
    """Exhaustive sweep: smallest candidate threshold whose OOD recall (score <= tau) reaches tpr."""
    id_s, ood_s = np.asarray(id_s, float), np.asarray(ood_s, float)
    for tau in np.sort(np.unique(np.r_[id_s, ood_s])):
        if np.mean(ood_s <= tau) >= tpr - 1e-9:
            return float(np.mean(id_s <= tau))
    return 1.0


def brute_ap(pos, neg):
    """Average precision by sweeping every distinct threshold from high to low."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    ap, prev_recall = 0.0, 0.0
    for tau in np.sort(np.unique(np.r_[pos, neg]))[::-1]:
        tp = np.sum(pos >= tau)
        fp = np.sum(neg >= tau)
        recall = tp / pos.size
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def relu_pattern(fn):
    """Signs of every hidden ReLU pre-activation evaluated while ``fn()`` runs."""
    seen = []

    def call(self, x):
        out, acts = MLPNet.forward_cached(self, x)
        seen.extend(a > 0 for a in acts[1:])
        return out

    with patch.object(MLPNet, "__call__", call):
        fn()
    return np.concatenate([s.ravel() for s in seen])
