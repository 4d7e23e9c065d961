import numpy as np
import pytest

import tsmamba


def tiny_config(channels=2):
    c = tsmamba.ModelConfig()
    c.lookback, c.horizon, c.patch_len = 32, 8, 8
    c.d_model, c.n_layers, c.head_dim, c.d_state = 8, 1, 4, 4
    c.n_channels = channels
    return c


def test_forecast_shape_and_determinism():
    model = tsmamba.Model(tiny_config(), seed=3)
    x = np.random.default_rng(0).normal(size=(2, 32))
    y = model.forecast(x)
    assert y.shape == (2, 8)
    np.testing.assert_array_equal(y, model.forecast(x))


def test_affine_equivariance():
    model = tsmamba.Model(tiny_config(), seed=4)
    x = np.random.default_rng(1).normal(size=(2, 32))
    scale, shift = np.array([[3.0], [0.5]]), np.array([[10.0], [-2.0]])
    np.testing.assert_allclose(model.forecast(scale * x + shift), scale * model.forecast(x) + shift, atol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    model = tsmamba.Model(tiny_config(), seed=5)
    path = str(tmp_path / "m.ckpt")
    model.save(path, "stage2")
    loaded = tsmamba.load_checkpoint(path)
    assert tsmamba.checkpoint_stage(path) == "stage2"
    assert loaded.parameter_names() == model.parameter_names()
    for name in model.parameter_names():
        np.testing.assert_array_equal(loaded.parameter(name), model.parameter(name))


def test_errors_carry_kind(tmp_path):
    with pytest.raises(tsmamba.Error, match="IoError|CorruptCheckpoint"):
        tsmamba.load_checkpoint(str(tmp_path / "missing.ckpt"))
    model = tsmamba.Model(tiny_config(), seed=6)
    with pytest.raises(tsmamba.Error, match="ShapeMismatch"):
        model.forecast(np.zeros((2, 31)))


def test_revin_two_point_stats():
    x_hat, mean, std = tsmamba.revin_normalize(np.array([[0.0, 2.0]]), eps=0.0)
    np.testing.assert_allclose(x_hat, [[-1.0, 1.0]])
    assert mean[0] == 1.0 and std[0] == 1.0


def test_scan_modes_agree():
    rng = np.random.default_rng(2)
    d, n, length = 4, 3, 50
    args = dict(
        a_log=rng.uniform(-1, 1, (d, n)),
        x_to_b=rng.uniform(-1, 1, (n, d)),
        x_to_c=rng.uniform(-1, 1, (n, d)),
        x_to_dt=rng.uniform(-1, 1, (1, d)),
        dt_bias=rng.uniform(-3, 0, d),
        d_skip=rng.uniform(-1, 1, d),
    )
    x = rng.normal(size=(d, length))
    seq = tsmamba.selective_scan(x, parallel=False, **args)
    par = tsmamba.selective_scan(x, parallel=True, **args)
    assert np.max(np.abs(seq - par)) < 1e-9


def test_synth_and_metrics():
    data = tsmamba.synth("cross_lag", seed=1, channels=2, rows=200, lag=4, gain=1.0)
    assert data.shape == (200, 2)
    np.testing.assert_array_equal(data[4:, 1], data[:-4, 0])
    assert tsmamba.mse(np.array([1.0, -1.0]), np.zeros(2)) == 1.0
    assert tsmamba.mae(np.array([1.0, -1.0]), np.zeros(2)) == 1.0
