import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rofl.channel import (
    ChannelRealization, SystemConfig, complex_normal, db_to_linear, draw_channel,
    estimate_sum_channel, linear_to_db, transmit, transmit_block,
)
from rofl.rng import Purpose, Streams, generator


def test_streams_depend_only_on_key():
    a = generator(7, 3, Purpose.NOISE).standard_normal(4)
    b = Streams(7).child(3).rng(Purpose.NOISE).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    c = generator(7, 3, Purpose.CHANNEL).standard_normal(4)
    assert not np.allclose(a, c)


def test_db_round_trip():
    assert db_to_linear(10.0) == pytest.approx(10.0)
    assert linear_to_db(100.0) == pytest.approx(20.0)
    assert db_to_linear(math.inf) == math.inf


@pytest.mark.parametrize("kwargs", [dict(M=0, K=1), dict(M=4, K=0), dict(M=4, K=2, d=0),
                                    dict(M=4, K=2, power=0.0), dict(M=4, K=2, snr_db=math.nan),
                                    dict(M=4, K=2, pilot_repetitions=-1), dict(M=2.5, K=1)])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        SystemConfig(**kwargs)


def test_noise_variance_follows_snr():
    cfg = SystemConfig(M=8, K=2, snr_db=10.0, power=2.0)
    assert cfg.noise_var == pytest.approx(0.2)
    assert SystemConfig(M=8, K=2, snr_db=math.inf).noise_var == 0.0


def test_single_antenna_unit_power():
    cfg = SystemConfig(M=1, K=1)
    rng = generator(0, Purpose.CHANNEL)
    h = np.array([draw_channel(cfg, rng).per_user[0, 0] for _ in range(20000)])
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=4 * math.sqrt(1 / 20000))


def test_channel_gain_mean_concentrates():
    M, K, n = 256, 8, 100_000
    rng = generator(1, Purpose.CHANNEL)
    total, done = 0.0, 0
    while done < n:
        H = complex_normal(rng, (1000, M, K), 1.0 / M)
        total += float(np.sum(np.abs(H[:, :, 0]) ** 2))
        done += 1000
    mean = total / n
    assert abs(mean - 1.0) <= 3 * math.sqrt(1 / (M * n))


def test_draw_is_deterministic():
    cfg = SystemConfig(M=16, K=3, pilot_repetitions=2, snr_db=5)
    a = draw_channel(cfg, generator(5, 0), generator(5, 1))
    b = draw_channel(cfg, generator(5, 0), generator(5, 1))
    np.testing.assert_array_equal(a.per_user, b.per_user)
    np.testing.assert_array_equal(a.sum_estimate, b.sum_estimate)


def test_perfect_pilot_by_default():
    r = draw_channel(SystemConfig(M=16, K=3), generator(0))
    np.testing.assert_array_equal(r.sum_estimate, r.per_user.sum(axis=1))
    np.testing.assert_array_equal(r.pilot_error, 0)


def test_noiseless_pilot_is_exact():
    cfg = SystemConfig(M=16, K=3, snr_db=math.inf, pilot_repetitions=3)
    r = draw_channel(cfg, generator(0), generator(1))
    np.testing.assert_array_equal(r.sum_estimate, r.sum)


@pytest.mark.parametrize("reps", [1, 3])
def test_pilot_error_energy(reps):
    M, trials = 32, 10_000
    cfg = SystemConfig(M=M, K=4, snr_db=3.0, pilot_repetitions=reps)
    H = complex_normal(generator(0), (M, 4), 1 / M)
    r = ChannelRealization(H, H.sum(axis=1), H.sum(axis=1))
    rng = generator(1)
    errs = np.array([np.sum(np.abs(estimate_sum_channel(r, cfg, rng) - r.sum) ** 2)
                     for _ in range(trials)])
    expected = M * cfg.noise_var / reps
    assert abs(errs.mean() - expected) <= 4 * errs.std() / math.sqrt(trials)


def test_four_pilots_halve_error_std():
    M, trials = 64, 4000
    H = complex_normal(generator(0), (M, 2), 1 / M)
    r = ChannelRealization(H, H.sum(axis=1), H.sum(axis=1))
    stds = []
    for reps in (1, 4):
        cfg = SystemConfig(M=M, K=2, snr_db=0.0, pilot_repetitions=reps)
        rng = generator(reps)
        e = np.stack([estimate_sum_channel(r, cfg, rng) - r.sum for _ in range(trials)])
        stds.append(np.sqrt(np.mean(np.abs(e) ** 2)))
    assert stds[0] / stds[1] == pytest.approx(2.0, rel=0.05)


def test_estimate_needs_repetitions():
    cfg = SystemConfig(M=4, K=1)
    r = draw_channel(cfg, generator(0))
    with pytest.raises(ValueError):
        estimate_sum_channel(r, cfg, generator(1))


def test_noiseless_single_user():
    cfg = SystemConfig(M=8, K=1, snr_db=math.inf, power=4.0)
    r = draw_channel(cfg, generator(0))
    rx = transmit(r, [0.7], cfg, generator(1))
    np.testing.assert_allclose(rx.y, 2.0 * 0.7 * r.per_user[:, 0], rtol=0, atol=1e-15)


def test_zero_symbols_give_pure_noise():
    cfg = SystemConfig(M=20_000, K=3, snr_db=4.0)
    r = draw_channel(cfg, generator(0))
    rx = transmit(r, np.zeros(3), cfg, generator(1))
    np.testing.assert_array_equal(rx.y, rx.noise)
    assert np.mean(np.abs(rx.y) ** 2) == pytest.approx(cfg.noise_var, rel=0.05)


def test_superposition_of_two_users():
    cfg = SystemConfig(M=2, K=2, snr_db=math.inf)
    r = draw_channel(cfg, generator(3))
    rx = transmit(r, [1.0, -1.0], cfg, generator(4))
    np.testing.assert_allclose(rx.y, r.per_user[:, 0] - r.per_user[:, 1], atol=1e-15)


def test_transmit_rejects_wrong_length():
    cfg = SystemConfig(M=4, K=2)
    r = draw_channel(cfg, generator(0))
    with pytest.raises(ValueError):
        transmit(r, [1.0, 2.0, 3.0], cfg, generator(1))
    with pytest.raises(ValueError):
        transmit_block(r, np.ones((3, 5)), cfg, generator(1))


@settings(max_examples=30, deadline=None)
@given(M=st.integers(1, 12), K=st.integers(1, 5), d=st.integers(1, 6), seed=st.integers(0, 2 ** 32))
def test_block_matches_slotwise_model(M, K, d, seed):
    cfg = SystemConfig(M=M, K=K, snr_db=7.0, power=1.5)
    r = draw_channel(cfg, generator(seed))
    X = generator(seed, 9).standard_normal((K, d))
    Y, noise = transmit_block(r, X, cfg, generator(seed, 1))
    np.testing.assert_allclose(Y, math.sqrt(1.5) * r.per_user @ X + noise, atol=1e-12)
