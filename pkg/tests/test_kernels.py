"""The numba kernels and their pure-numpy fallbacks must agree exactly."""

import numpy as np
import pytest

from flowood import kernels
from flowood.metrics import group_scores

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def test_midranks_agree():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 20, 500).astype(np.float64)
    np.testing.assert_array_equal(kernels.nb_midranks(x), kernels.np_midranks(x))


@pytest.mark.parametrize("positive", [True, False])
@pytest.mark.parametrize("tpr", [0.95, 0.5, 1.0])
def test_metrics_agree(positive, tpr):
    rng = np.random.default_rng(1)
    for _ in range(20):
        idg, oodg, n = group_scores(rng.integers(0, 30, 80), rng.integers(5, 35, 60))
        ic = np.bincount(idg, minlength=n).astype(np.float64)
        oc = np.bincount(oodg, minlength=n).astype(np.float64)
        a = kernels.nb_metrics_from_counts(ic, oc, tpr, positive)
        b = kernels.np_metrics_from_counts(ic, oc, tpr, positive)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_bootstrap_agree():
    rng = np.random.default_rng(2)
    idg, oodg, n = group_scores(rng.normal(1, 1, 120).round(1), rng.normal(0, 1, 90).round(1))
    ii = rng.integers(0, idg.size, (50, idg.size))
    oi = rng.integers(0, oodg.size, (50, oodg.size))
    a = kernels.nb_bootstrap_metrics(idg, oodg, n, ii, oi, 0.95, True)
    b = kernels.np_bootstrap_metrics(idg, oodg, n, ii, oi, 0.95, True)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_adam_bit_identical():
    rng = np.random.default_rng(3)
    p0 = rng.normal(size=1000).astype(np.float32)
    state = [(p0.copy(), np.zeros(1000), np.zeros(1000)) for _ in range(2)]
    for t in range(1, 6):
        g = rng.normal(size=1000).astype(np.float32)
        bc1, bc2 = 1 - 0.9**t, 1 - 0.999**t
        for fn, (p, m, v) in zip((kernels.nb_adam_update, kernels.np_adam_update), state):
            fn(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
    for a, b in zip(state[0], state[1]):
        np.testing.assert_array_equal(a, b)


def test_backend_flag():
    assert kernels.BACKEND in ("numba", "numpy")
    assert (kernels.adam_update is kernels.nb_adam_update) == kernels.USE_NUMBA
