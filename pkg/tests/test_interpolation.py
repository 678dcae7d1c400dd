import math

import numpy as np
import pytest

from agrisits import accel
from agrisits.interpolation import (
    ObservationSeries,
    RbfEnsembleConfig,
    default_target_times,
    kernel_table,
    rbf_interpolate,
)


def oracle_interpolate(times, values, valid, cfg):
    """Direct-summation reference: per-kernel weighted means blended by gain x mass."""
    sigmas = list(cfg.sigmas)
    gains = [2.0 if s in cfg.boosted else 1.0 for s in sigmas]
    n_t = len(cfg.target_times)
    n_b = values.shape[1]
    out = np.zeros((n_t, n_b))
    filled = np.zeros(n_t, dtype=bool)
    for ti, tau in enumerate(cfg.target_times):
        masses, yhats = [], []
        for s in sigmas:
            m = 0.0
            num = np.zeros(n_b)
            for i in range(len(times)):
                if not valid[i]:
                    continue
                w = math.exp(-((times[i] - tau) ** 2) / (2.0 * s * s))
                m += w
                num = num + w * values[i]
            masses.append(m)
            yhats.append(num / m if m > 0 else None)
        if max(masses) >= 1e-12:
            unum = np.zeros(n_b)
            uden = 0.0
            for g, m, y in zip(gains, masses, yhats):
                if y is None:
                    continue
                unum = unum + g * m * y
                uden += g * m
            out[ti] = unum / uden
            filled[ti] = True
        elif cfg.fallback == "nearest":
            vidx = np.flatnonzero(valid)
            if vidx.size:
                out[ti] = values[vidx[np.argmin(np.abs(times[vidx] - tau))]]
                filled[ti] = True
    return out, filled


def random_series(rng, n_bands=10, n_obs=25, lo=-40.0, hi=400.0):
    times = np.sort(rng.uniform(lo, hi, size=n_obs))
    while np.any(np.diff(times) <= 0):
        times = np.sort(rng.uniform(lo, hi, size=n_obs))
    values = rng.uniform(0.0, 0.6, size=(n_obs, n_bands))
    valid = rng.random(n_obs) < 0.8
    return ObservationSeries(times=times, values=values, valid=valid)


def test_constant_series_is_fixed_point():
    times = np.sort(np.random.default_rng(1).uniform(0, 350, 30))
    series = ObservationSeries(times, np.full((30, 10), 0.3), np.ones(30, dtype=bool))
    out, filled = rbf_interpolate(series, RbfEnsembleConfig())
    assert filled.all()
    assert np.abs(out - 0.3).max() < 1e-12


def test_single_observation_everywhere():
    times = np.array([100.0])
    values = np.array([[0.1, 0.5, 0.9]])
    series = ObservationSeries(times, values, np.array([True]))
    out, filled = rbf_interpolate(series, RbfEnsembleConfig())
    assert filled.all()
    assert np.abs(out - values[0]).max() < 1e-12


def test_sine_samples_match_direct_oracle():
    rng = np.random.default_rng(7)
    times = np.sort(rng.uniform(-20, 380, 25))
    values = (0.3 + 0.2 * np.sin(times / 40.0))[:, None] * np.linspace(0.5, 1.5, 10)[None, :]
    series = ObservationSeries(times, values, np.ones(25, dtype=bool))
    cfg = RbfEnsembleConfig()
    out, filled = rbf_interpolate(series, cfg)
    expect, efilled = oracle_interpolate(series.times, series.values, series.valid, cfg)
    assert np.array_equal(filled, efilled)
    assert np.abs(out - expect).max() < 1e-9


def test_random_series_match_oracle_and_hull():
    cfg = RbfEnsembleConfig()
    for seed in range(30):
        rng = np.random.default_rng(seed)
        s = random_series(rng)
        out, filled = rbf_interpolate(s, cfg)
        expect, efilled = oracle_interpolate(s.times, s.values, s.valid, cfg)
        assert np.array_equal(filled, efilled)
        assert np.abs(out - expect).max() < 1e-9
        if s.valid.any():
            vmin = s.values[s.valid].min(axis=0)
            vmax = s.values[s.valid].max(axis=0)
            assert (out[filled] >= vmin[None, :] - 1e-12).all()
            assert (out[filled] <= vmax[None, :] + 1e-12).all()


def test_empty_series_falls_back_to_zero():
    series = ObservationSeries(np.array([10.0, 20.0]), np.zeros((2, 10)) + 5.0, np.zeros(2, dtype=bool))
    out, filled = rbf_interpolate(series, RbfEnsembleConfig())
    assert not filled.any()
    assert np.all(out == 0.0)


def test_far_observation_uses_nearest_fallback():
    # one valid point 4000 days away: every kernel mass underflows past 1e-12
    series = ObservationSeries(np.array([-4000.0]), np.full((1, 10), 0.42), np.array([True]))
    out, filled = rbf_interpolate(series, RbfEnsembleConfig())
    assert filled.all()
    assert np.abs(out - 0.42).max() < 1e-12


def test_time_shift_equivariance():
    rng = np.random.default_rng(3)
    s = random_series(rng)
    cfg = RbfEnsembleConfig()
    out, _ = rbf_interpolate(s, cfg)
    shift = 500.0
    cfg2 = RbfEnsembleConfig(target_times=cfg.target_times + shift)
    s2 = ObservationSeries(s.times + shift, s.values, s.valid)
    out2, _ = rbf_interpolate(s2, cfg2)
    assert np.abs(out - out2).max() < 1e-9


def test_linearity_in_values():
    rng = np.random.default_rng(4)
    s = random_series(rng)
    cfg = RbfEnsembleConfig()
    out, _ = rbf_interpolate(s, cfg)
    out2, _ = rbf_interpolate(ObservationSeries(s.times, 2.0 * s.values, s.valid), cfg)
    assert np.array_equal(out2, 2.0 * out)


def test_non_increasing_times_rejected():
    with pytest.raises(ValueError, match="increasing"):
        ObservationSeries(np.array([5.0, 5.0]), np.zeros((2, 10)), np.ones(2, dtype=bool))


def test_config_validation():
    with pytest.raises(ValueError):
        RbfEnsembleConfig(sigmas=(10.0, 5.0))
    with pytest.raises(ValueError):
        RbfEnsembleConfig(boosted=(3.0,))
    with pytest.raises(ValueError):
        RbfEnsembleConfig(target_times=np.array([0.0, 10.0, 25.0]))
    with pytest.raises(ValueError):
        RbfEnsembleConfig(fallback="interpolate")


def test_backends_agree():
    rng = np.random.default_rng(11)
    times = np.sort(rng.uniform(0, 360, 40))
    values = rng.uniform(0, 1, size=(6, 40, 10))
    valid = rng.random((6, 40)) < 0.7
    cfg = RbfEnsembleConfig()
    table = kernel_table(times, cfg)
    out_np, ok_np = accel.rbf_ensemble_numpy(table, cfg.gains, values, valid.astype(np.float64))
    out_nb, ok_nb = accel.rbf_ensemble_numba(table, cfg.gains, values, valid.astype(np.float64))
    assert np.array_equal(ok_np, ok_nb)
    assert np.abs(out_np - out_nb).max() < 1e-12


def test_default_grid_is_36_steps_of_10_days():
    t = default_target_times()
    assert t.shape == (36,)
    assert np.all(np.diff(t) == 10.0)
