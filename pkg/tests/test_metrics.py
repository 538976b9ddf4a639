import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowood.errors import ArgumentError
from flowood.metrics import aupr, auroc, fpr_at_tpr, ood_metrics
from helpers import brute_ap, brute_auroc, brute_fpr


def test_auroc_examples():
    assert auroc([3, 4], [1, 2]) == 1.0
    assert auroc([1], [1]) == 0.5
    assert auroc([1, 3], [2, 4]) == 0.25


def test_empty_inputs_rejected():
    for fn in (auroc, fpr_at_tpr):
        with pytest.raises(ArgumentError):
            fn([], [1.0])
    with pytest.raises(ArgumentError):
        aupr([1.0], [])
    with pytest.raises(ArgumentError):
        auroc([np.nan], [1.0])


def test_fpr_examples():
    assert fpr_at_tpr([10, 11, 12], [1, 2, 3]) == 0.0
    assert fpr_at_tpr([10, 11, 12], [1, 2, 3], 0.5) == 0.0
    r = np.arange(1, 21)
    assert fpr_at_tpr(r, r) == pytest.approx(0.95)
    assert fpr_at_tpr(np.arange(11, 31), r, 0.95) == pytest.approx(0.45)


def test_fpr_openood_convention():
    # ID positive: smallest-FPR threshold with ID recall >= 95%, FPR = OOD fraction scoring >= tau
    id_s, ood_s = np.arange(11, 31), np.arange(1, 21)
    tau = np.sort(id_s)[::-1][int(np.ceil(0.95 * 20)) - 1]
    assert fpr_at_tpr(id_s, ood_s, 0.95, "openood") == pytest.approx(np.mean(ood_s >= tau))
    with pytest.raises(ArgumentError):
        fpr_at_tpr(id_s, ood_s, 0.95, "other")
    with pytest.raises(ArgumentError):
        fpr_at_tpr(id_s, ood_s, 0.0)


def test_aupr_examples():
    assert aupr([2, 3], [0, 1]) == 1.0
    assert aupr([1], [2]) == 0.5
    assert aupr([5, 5, 5], [5, 5]) == pytest.approx(3 / 5)


def test_aupr_out_is_ap_on_negated_scores():
    r = np.random.default_rng(0)
    ood, id_ = r.normal(0, 1, 50), r.normal(1, 1, 70)
    assert aupr(ood, id_, positive_is_high=False) == pytest.approx(brute_ap(-ood, -id_), abs=1e-12)
    m = ood_metrics(id_, ood)
    assert m["aupr_out"] == pytest.approx(brute_ap(-ood, -id_), abs=1e-12)
    assert m["aupr_in"] == pytest.approx(brute_ap(id_, ood), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    id_s=st.lists(st.integers(0, 12), min_size=1, max_size=40),
    ood_s=st.lists(st.integers(0, 12), min_size=1, max_size=40),
    tpr=st.sampled_from([0.5, 0.8, 0.95, 1.0]),
)
def test_metrics_match_brute_force_property(id_s, ood_s, tpr):
    m = ood_metrics(id_s, ood_s, tpr)
    assert m["auroc"] == pytest.approx(brute_auroc(id_s, ood_s), abs=1e-12)
    assert m["fpr"] == pytest.approx(brute_fpr(id_s, ood_s, tpr), abs=1e-12)
    assert m["aupr_in"] == pytest.approx(brute_ap(id_s, ood_s), abs=1e-12)
    assert m["aupr_out"] == pytest.approx(brute_ap([-v for v in ood_s], [-v for v in id_s]), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(id_s=st.lists(st.integers(-5, 5), min_size=1, max_size=30),
       ood_s=st.lists(st.integers(-5, 5), min_size=1, max_size=30))
def test_auroc_complement(id_s, ood_s):
    assert auroc(id_s, ood_s) + auroc(ood_s, id_s) == 1.0


def test_monotone_transform_invariance():
    r = np.random.default_rng(1)
    a, b = r.normal(0.5, 1, 200).round(2), r.normal(0, 1, 150).round(2)
    base = ood_metrics(a, b)
    moved = ood_metrics(np.exp(a) * 3 + 1, np.exp(b) * 3 + 1)
    for k in base:
        assert moved[k] == pytest.approx(base[k], abs=1e-12)


def test_total_ties():
    m = ood_metrics(np.ones(7), np.ones(3))
    assert m["auroc"] == 0.5
    assert m["aupr_in"] == pytest.approx(0.7)
    assert m["aupr_out"] == pytest.approx(0.3)
