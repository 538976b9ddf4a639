import math

import numpy as np
import pytest

from flowood.errors import ArgumentError, RegistrationError, StateError
from flowood.evaluator import ScoredDataset, evaluate_suite
from flowood.features import ClassifierHead, FeatureSet
from flowood.scorers import (
    Bundle,
    MahalanobisFit,
    VimFit,
    available_scorers,
    default_principal_dim,
    get_scorer,
    mds_fit_score,
    plugin_scorer,
    react_fit_score,
    react_score,
    react_threshold,
    score_energy,
    score_flow,
    score_msp,
    unregister_scorer,
    vim_fit_score,
)
from helpers import identity_model


def rng(seed=0):
    return np.random.default_rng(seed)


# -- MSP / energy --------------------------------------------------------------- #


def test_msp_examples():
    assert score_msp([[0, 0, 0]])[0] == pytest.approx(1 / 3, abs=1e-15)
    assert score_msp([[10, 0]])[0] == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-12)
    hot = score_msp([[2, 1]], T=1000)[0]
    assert 0.5 < hot < 0.5 + 1e-3


def test_msp_range_and_shift():
    logits = rng(1).normal(0, 5, (100, 6))
    s = score_msp(logits)
    assert ((s > 0) & (s <= 1)).all()
    np.testing.assert_allclose(score_msp(logits + 123.4), s, atol=1e-12)


def test_msp_needs_two_classes_and_positive_temperature():
    with pytest.raises(ArgumentError):
        score_msp([[1.0]])
    with pytest.raises(ArgumentError):
        score_msp([[1.0, 2.0]], T=0)


def test_energy_examples():
    assert score_energy([[0, 0]])[0] == pytest.approx(math.log(2), abs=1e-15)
    assert score_energy([[5]])[0] == 5
    with pytest.raises(ArgumentError):
        score_energy([[1.0]], T=-1)


def test_energy_shift_property():
    logits = rng(2).normal(0, 3, (50, 4))
    np.testing.assert_allclose(score_energy(logits + 7.25), score_energy(logits) + 7.25, atol=1e-12)


def test_energy_stable_for_large_logits():
    assert np.isfinite(score_energy([[1e4, 1e4 - 1]])).all()


# -- MDS --------------------------------------------------------------------------- #


def test_mds_identity_covariance():
    x = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
    s = mds_fit_score(x, np.zeros(4, int), np.array([[1.0, 1.0], [0.0, 0.0]]))
    # pooled covariance of these points is I/2; ridge is tiny
    np.testing.assert_allclose(s, [-4.0, 0.0], rtol=1e-5, atol=1e-12)


def test_mds_score_zero_at_class_mean():
    x = rng(3).normal(size=(60, 3))
    y = np.repeat([0, 1, 2], 20)
    fit = MahalanobisFit().fit(x, y)
    np.testing.assert_allclose(fit.min_distance(fit.means), 0, atol=1e-10)


def test_mds_matches_dense_solve():
    r = rng(4)
    x = np.r_[r.normal(0, 1, (30, 2)), r.normal(3, 1, (30, 2))]
    y = np.repeat([0, 1], 30)
    q = r.normal(1, 2, (25, 2))
    mus = [x[y == c].mean(0) for c in (0, 1)]
    xc = np.r_[x[y == 0] - mus[0], x[y == 1] - mus[1]]
    cov = xc.T @ xc / len(x)
    cov += 1e-6 * np.trace(cov) / 2 * np.eye(2)
    oracle = -np.min([[(qi - m) @ np.linalg.solve(cov, qi - m) for m in mus] for qi in q], axis=1)
    np.testing.assert_allclose(mds_fit_score(x, y, q), oracle, rtol=1e-6, atol=1e-9)


def test_mds_affine_invariance():
    r = rng(5)
    x = r.normal(size=(80, 3))
    y = np.repeat([0, 1], 40)
    q = r.normal(size=(10, 3))
    a = r.normal(size=(3, 3)) + 3 * np.eye(3)
    b = r.normal(size=3)
    np.testing.assert_allclose(mds_fit_score(x @ a.T + b, y, q @ a.T + b), mds_fit_score(x, y, q), rtol=1e-5)


def test_mds_class_too_small():
    with pytest.raises(ArgumentError):
        MahalanobisFit().fit(np.zeros((3, 2)), np.array([0, 0, 1]))


# -- ViM --------------------------------------------------------------------------- #


def head(c=3, d=6, seed=6):
    r = rng(seed)
    return ClassifierHead(r.normal(size=(c, d)), r.normal(size=c))


def test_vim_zero_residual_equals_energy():
    h = head()
    x = rng(7).normal(size=(200, 6)) * np.array([5, 4, 3, 0.1, 0.1, 0.1])
    fit = VimFit(principal_dim=3).fit(x, h)
    q = fit.origin + rng(8).normal(size=(5, 6)) @ (np.eye(6) - fit.residual_basis @ fit.residual_basis.T)
    np.testing.assert_allclose(fit.score(q), score_energy(h.logits(q)), atol=1e-9)


def test_vim_last_eigenvector_residual():
    h = head(d=4)
    x = rng(9).normal(size=(5000, 4))
    fit = VimFit(principal_dim=3).fit(x, h)
    xc = x - fit.origin
    w, v = np.linalg.eigh(xc.T @ xc / len(x))
    q = rng(10).normal(size=(20, 4))
    np.testing.assert_allclose(fit.residual_norm(q), np.abs((q - fit.origin) @ v[:, 0]), atol=1e-6)


def test_vim_alpha_zero_is_energy_and_monotone():
    h = head()
    x = rng(11).normal(size=(100, 6))
    q = rng(12).normal(size=(30, 6))
    np.testing.assert_allclose(vim_fit_score(x, h, 2, q, alpha=0.0), score_energy(h.logits(q)), atol=1e-12)
    fit = VimFit(2).fit(x, h)
    assert fit.alpha > 0
    logits = h.logits(q[:1])
    base = fit.score(q[:1], logits)
    far = q[:1] + 10 * fit.residual_basis[:, 0]
    assert fit.score(far, logits) < base


def test_vim_principal_dim_bounds():
    with pytest.raises(ArgumentError):
        VimFit(6).fit(rng().normal(size=(10, 6)), head())
    assert default_principal_dim(256) == 64 and default_principal_dim(10) == 5


# -- ReAct ------------------------------------------------------------------------- #


def test_react_examples():
    h1 = ClassifierHead(np.array([[1.0]]), np.array([0.0]))
    assert react_score(np.array([[5.0]]), h1, 2.0)[0] == pytest.approx(2.0)
    h = head()
    x = rng(13).normal(size=(50, 6))
    plain = score_energy(h.logits(x))
    np.testing.assert_array_equal(react_score(x, h, np.inf), plain)
    np.testing.assert_allclose(react_fit_score(x, h, 100.0, x), plain, atol=0)
    with pytest.raises(ArgumentError):
        react_threshold(x, 0)


# -- flow scorer -------------------------------------------------------------------- #


def test_score_flow_identity():
    assert score_flow(identity_model(2), np.zeros((1, 2)))[0] == pytest.approx(-1.837877, abs=1e-6)
    with pytest.raises(ArgumentError):
        score_flow(identity_model(2), np.zeros((1, 3)))


# -- registry, bundle and plugins ----------------------------------------------------- #


def bundle(n=40, seed=14):
    r = rng(seed)
    x = r.normal(size=(n, 6)).astype(np.float32)
    h = head(d=4)
    labels = r.integers(0, 3, n)
    labels[:3] = [0, 1, 2]
    fs = FeatureSet(x, [2, 4], h.logits(x[:, 2:]).astype(np.float32), labels)
    return Bundle(fs, h, penultimate_stage=1)


def test_builtins_registered():
    for name in ("flow", "msp", "msp_temp", "energy", "mds", "vim", "react"):
        assert name in available_scorers()


def test_unknown_scorer_lists_available():
    with pytest.raises(RegistrationError) as info:
        get_scorer("nope")
    assert "energy" in str(info.value)


def test_fit_required_before_score():
    with pytest.raises(StateError):
        get_scorer("mds").score(bundle())


def test_every_builtin_scores_bundle():
    b = bundle()
    for name in ("msp", "msp_temp", "energy", "mds", "vim", "react"):
        s = get_scorer(name).fit(b).score(b)
        assert s.shape == (b.features.n,) and np.isfinite(s).all()


def test_duplicated_rows_get_duplicated_scores():
    b = bundle()
    dup = Bundle(b.features.take(np.r_[0, 0, 1]), b.head, 1)
    for name in ("msp", "energy", "mds", "vim", "react"):
        s = get_scorer(name).fit(b).score(dup)
        assert s[0] == s[1]


def test_plugin_lifecycle():
    plugin_scorer("const_test", lambda b: None, lambda state, b: np.ones(b.features.n))
    try:
        with pytest.raises(RegistrationError):
            plugin_scorer("const_test", lambda b: None, lambda s, b: None)
        p = get_scorer("const_test")
        with pytest.raises(StateError):
            p.score(bundle())
        b = bundle()
        s = p.fit(b).score(b)
        rep = evaluate_suite(ScoredDataset(s, "id", "id"), [ScoredDataset(s[:10], "ood", "o")], n_boot=0)
        assert rep.micro.values["auroc"] == 0.5
    finally:
        unregister_scorer("const_test")


def test_plugin_wrapping_energy_matches_builtin():
    plugin_scorer("energy_wrap", lambda b: None, lambda state, b: score_energy(b.logits))
    try:
        b = bundle()
        np.testing.assert_array_equal(get_scorer("energy_wrap").fit(b).score(b), get_scorer("energy").score(b))
    finally:
        unregister_scorer("energy_wrap")


def test_logits_fall_back_to_head():
    b = bundle()
    no_logits = Bundle(FeatureSet(b.features.data, b.features.stage_dims), b.head, 1)
    np.testing.assert_allclose(no_logits.logits, b.logits, rtol=1e-5, atol=1e-5)
    with pytest.raises(ArgumentError):
        Bundle(FeatureSet(b.features.data, b.features.stage_dims)).logits
