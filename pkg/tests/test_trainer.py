import math
import struct

import numpy as np
import pytest

from flowood.errors import ArgumentError, CorruptionError, FormatError, TrainingDivergedError, UnsupportedVersionError
from flowood.flow import FlowModel
from flowood.metrics import auroc
from flowood.trainer import (
    Adam,
    TrainConfig,
    checkpoint_roundtrip,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    nll_loss,
    param_gradients,
    train,
)
from helpers import identity_model, perturbed_model

SMALL = dict(hidden=(16, 32, 16), batch_size=128)


def gauss(n, dim, mean=0.0, std=1.0, seed=0):
    return (mean + std * np.random.default_rng(seed).standard_normal((n, dim))).astype(np.float32)


# -- loss and gradients ------------------------------------------------------------ #


def test_nll_examples():
    assert nll_loss(identity_model(2), np.zeros((1, 2))) == pytest.approx(1.837877, abs=1e-6)
    m1 = FlowModel(1, np.zeros((0, 1), bool), (4,))
    assert nll_loss(m1, np.zeros((2, 1))) == pytest.approx(0.918939, abs=1e-6)


def test_nll_empty_batch():
    with pytest.raises(ArgumentError):
        nll_loss(identity_model(2), np.zeros((0, 2)))


def test_duplicated_rows_leave_loss_and_gradient_unchanged():
    m = perturbed_model(4, seed=1, dtype=np.float64)
    x = gauss(8, 4, seed=1).astype(np.float64)
    x2 = np.concatenate([x, x])
    assert nll_loss(m, x) == pytest.approx(nll_loss(m, x2), rel=1e-12)
    g1, g2 = param_gradients(m, x), param_gradients(m, x2)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


def test_symmetric_batch_zero_actnorm_bias_gradient():
    m = identity_model(4, dtype=np.float64)
    x = gauss(5, 4, seed=2).astype(np.float64)
    g = param_gradients(m, np.concatenate([x, -x]))
    for k, v in g.items():
        if k.endswith("actnorm.bias"):
            np.testing.assert_allclose(v, 0, atol=1e-12)


def test_gradient_matches_finite_differences_d2():
    m = perturbed_model(2, hidden=(4, 8, 4), seed=3, dtype=np.float64, out_scale=0.3)
    x = gauss(6, 2, seed=3).astype(np.float64)
    _, grad = m.nll_and_grad(x)
    h = 1e-5
    for i in np.random.default_rng(3).choice(m.params.size, 60, replace=False):
        old = m.params[i]
        m.params[i] = old + h
        up = nll_loss(m, x)
        m.params[i] = old - h
        down = nll_loss(m, x)
        m.params[i] = old
        fd = (up - down) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), 1e-3)


# -- Adam ---------------------------------------------------------------------- #


def test_adam_first_step():
    opt = Adam(1, lr=0.1)
    theta = np.zeros(1, np.float32)
    opt.step(theta, np.ones(1, np.float32))
    assert theta[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-6)


def test_adam_matches_reference_rule():
    rng = np.random.default_rng(4)
    opt = Adam(5, lr=1e-2)
    p = rng.normal(size=5)
    ref, m, v = p.copy(), np.zeros(5), np.zeros(5)
    p32 = p.astype(np.float32)
    ref = p32.astype(np.float64)
    for t in range(1, 8):
        g = rng.normal(size=5).astype(np.float32)
        opt.step(p32, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g.astype(np.float64) ** 2
        ref = ref - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        ref = ref.astype(np.float32).astype(np.float64)
    np.testing.assert_allclose(p32, ref, rtol=1e-6)


# -- configuration ---------------------------------------------------------------- #


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(learning_rate=0), dict(batch_size=0), dict(data_fraction=0),
                                 dict(eval_every=0), dict(clamp=-1)])
def test_config_validation(bad):
    with pytest.raises(ArgumentError):
        TrainConfig(**bad)


def test_config_dict_roundtrip():
    c = TrainConfig(epochs=3, hidden=(8, 8))
    assert TrainConfig.from_dict(c.to_dict()) == c


# -- training ----------------------------------------------------------------------- #


@pytest.fixture(scope="module")
def far_run():
    cfg = TrainConfig(epochs=8, seed=1, **SMALL)
    ck = train(gauss(1000, 4, seed=10), gauss(300, 4, seed=11), gauss(300, 4, mean=6.0, seed=12), cfg)
    return cfg, ck


def test_far_validation_auroc(far_run):
    _, ck = far_run
    assert ck.best_val_auroc > 0.99


def test_selection_is_max_of_history(far_run):
    _, ck = far_run
    aucs = [r["val_auroc"] for r in ck.meta["history"]]
    assert ck.best_val_auroc == max(aucs)
    assert ck.best_epoch == 1 + aucs.index(max(aucs))  # earliest on ties
    rescored = auroc(ck.model.log_prob(gauss(300, 4, seed=11)), ck.model.log_prob(gauss(300, 4, mean=6.0, seed=12)))
    assert rescored == ck.best_val_auroc


def test_training_is_deterministic(far_run):
    cfg, ck = far_run
    again = train(gauss(1000, 4, seed=10), gauss(300, 4, seed=11), gauss(300, 4, mean=6.0, seed=12), cfg)
    assert encode_checkpoint(again.model, again.meta) == encode_checkpoint(ck.model, ck.meta)


def test_single_epoch_returns_epoch_one():
    ck = train(gauss(300, 2, seed=1), gauss(50, 2, seed=2), gauss(50, 2, 3.0, seed=3),
               TrainConfig(epochs=1, **SMALL))
    assert ck.best_epoch == 1 and len(ck.meta["history"]) == 1


def test_snapshots_equal_shorter_runs():
    data = gauss(400, 2, seed=1), gauss(60, 2, seed=2), gauss(60, 2, 1.0, seed=3)
    long = train(*data, TrainConfig(epochs=6, **SMALL), snapshot_epochs=[2, 4])
    short = train(*data, TrainConfig(epochs=4, **SMALL))
    np.testing.assert_array_equal(long.snapshots[4].model.params, short.model.params)
    assert long.snapshots[4].meta == short.meta


def test_monotone_fit():
    ck = train(gauss(1024, 4, seed=5), gauss(100, 4, seed=6), gauss(100, 4, 2.0, seed=7),
               TrainConfig(epochs=100, batch_size=256, hidden=(8, 16, 8)))
    hist = ck.meta["history"]
    assert hist[-1]["train_nll"] < hist[0]["train_nll"]


def test_fit_scaled_gaussian_entropy():
    # N(0, diag(4, 4)): differential entropy log(2*pi*e*4)
    target = math.log(2 * math.pi * math.e * 4)
    ck = train(gauss(4000, 2, std=2.0, seed=1), gauss(500, 2, std=2.0, seed=2), gauss(500, 2, 4.0, 2.0, seed=3),
               TrainConfig(epochs=10, **SMALL))
    assert abs(nll_loss(ck.model, gauss(4000, 2, std=2.0, seed=4)) - target) < 0.15


def test_samples_follow_shifted_target():
    ck = train(gauss(10000, 4, mean=3.0, seed=1), gauss(500, 4, 3.0, seed=2), gauss(500, 4, 6.0, seed=3),
               TrainConfig(epochs=5, hidden=(16, 32, 16), batch_size=256))
    assert np.abs(ck.model.sample(10000, seed=9).mean(0) - 3.0).max() < 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch():
    with pytest.raises(TrainingDivergedError) as info:
        train(gauss(64, 2, seed=1), gauss(10, 2, seed=2), gauss(10, 2, 3.0, seed=3),
              TrainConfig(epochs=5, batch_size=8, learning_rate=1e30, hidden=(4,)))
    assert 1 <= info.value.epoch <= 5 and 0 <= info.value.batch < 8
    assert str(info.value.epoch) in str(info.value)


def test_width_mismatch_rejected():
    with pytest.raises(ArgumentError):
        train(gauss(10, 2), gauss(5, 3), gauss(5, 2), TrainConfig(epochs=1, hidden=(4,)))


# -- checkpoints ------------------------------------------------------------------- #


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = FlowModel.create(5, hidden=(8, 8), seed=3)
    m.initialize_actnorm(gauss(64, 5, 1.0, 2.0))
    probe = gauss(10, 5, seed=4)
    back = checkpoint_roundtrip(tmp_path / "m.nfck", m, {"note": "x", "best_epoch": 3})
    np.testing.assert_array_equal(back.model.log_prob(probe), m.log_prob(probe))
    assert back.meta == {"note": "x", "best_epoch": 3}


def test_checkpoint_flipped_byte(tmp_path):
    buf = bytearray(encode_checkpoint(perturbed_model(3, hidden=(4,))))
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(CorruptionError):
        decode_checkpoint(bytes(buf))


def test_checkpoint_future_version_and_truncation(tmp_path):
    buf = bytearray(encode_checkpoint(perturbed_model(3, hidden=(4,))))
    with pytest.raises(CorruptionError):
        decode_checkpoint(bytes(buf[:-40]))
    struct.pack_into("<H", buf, 4, 2)
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(bytes(buf))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "missing.nfck")
