import numpy as np
import pytest

from trajcast import kalman, pipeline
from trajcast.kalman import (KalmanConfig, KalmanState, SingularInnovationError, forecast_frames, initial_state,
                             kf_forecast_window, kf_predict, kf_update, process_noise, transition)


def state(mean, cov=None):
    return KalmanState(np.array(mean, dtype=float), np.eye(6) if cov is None else cov)


def test_predict_constant_velocity():
    s = kf_predict(state([0, 0, 10, 0, 0, 0]), 0.2)
    assert s.mean[:2] == pytest.approx([2.0, 0.0], abs=1e-12)


def test_predict_constant_acceleration():
    s = kf_predict(state([0, 0, 0, 0, 2, 0]), 0.2)
    assert s.mean[0] == pytest.approx(0.04, abs=1e-12)
    assert s.mean[2] == pytest.approx(0.4, abs=1e-12)


def test_predict_grows_trace():
    s = state(np.zeros(6))
    for _ in range(5):
        s2 = kf_predict(s, 0.2)
        assert np.trace(s2.cov) > np.trace(s.cov)
        s = s2


def test_transition_layout():
    f = transition(0.5)
    # x row: x + dt*vx + dt^2/2*ax
    assert np.array_equal(f[0], [1, 0, 0.5, 0, 0.125, 0])
    assert np.array_equal(f[3], [0, 0, 0, 1, 0, 0.5])
    q = process_noise(0.5, 2.0)
    assert np.allclose(q, q.T) and np.all(np.linalg.eigvalsh(q) >= -1e-15)


def test_update_exact_measurement_limit():
    prior = state([1, 2, 0, 0, 0, 0], np.eye(6) * 4.0)
    post = kf_update(prior, [5, -3], cfg=KalmanConfig(r_pos=1e-14))
    assert post.mean[:2] == pytest.approx([5, -3], abs=1e-9)


def test_update_uninformative_measurement():
    prior = state([1, 2, 3, 4, 0, 0], np.eye(6) * 4.0)
    post = kf_update(prior, [500, -300], cfg=KalmanConfig(r_pos=1e12))
    assert np.allclose(post.mean, prior.mean, rtol=1e-6, atol=1e-6 * 500)


def test_repeated_measurements_shrink_variance():
    s = initial_state([0, 0])
    last = np.inf
    for _ in range(20):
        s = kf_update(s, [1.0, 1.0])
        v = s.cov[0, 0]
        assert v < last
        last = v


def test_singular_innovation():
    cov = np.zeros((6, 6))
    cov[0, 0] = 1e20
    with pytest.raises(SingularInnovationError):
        kf_update(state(np.zeros(6), cov), [0, 0], cfg=KalmanConfig(r_pos=1e-300))


def test_config_validation():
    with pytest.raises(ValueError):
        KalmanConfig(q=0)
    with pytest.raises(ValueError):
        kf_predict(state(np.zeros(6)), 0.0)


def test_forecast_constant_velocity():
    t = np.arange(8) * 0.2
    pos = np.c_[5 * t, np.zeros(8)]
    pred = kf_forecast_window(pos, np.zeros((8, 2)))
    assert np.max(np.abs(pred - pos[-1] - [1.0, 0.0])) < 1e-6


def test_forecast_stationary():
    assert np.max(np.abs(kf_forecast_window(np.zeros((8, 2)), np.zeros((8, 2))))) < 1e-9


def test_forecast_frames_matches_window():
    t = np.arange(8) * 0.2
    xy = np.c_[3 * t + 0.5 * t * t, -2 * t]
    feats = pipeline.window_features(xy, np.ones(8), np.zeros(8), np.zeros(8))
    d = forecast_frames(feats)
    full = kf_forecast_window(xy - xy[0], feats[:, 2:4])
    assert np.allclose(d, full - (xy[-1] - xy[0]), atol=1e-12)


def test_translation_equivariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pos = np.cumsum(rng.normal(0, 1, (8, 2)), axis=0)
        acc = rng.normal(0, 1, (8, 2))
        shift = rng.uniform(-1e3, 1e3, 2)
        a = kf_forecast_window(pos, acc)
        b = kf_forecast_window(pos + shift, acc)
        assert np.max(np.abs(b - a - shift)) <= 1e-9


def test_covariance_symmetric_psd_random_cycles():
    rng = np.random.default_rng(2)
    s = initial_state([0, 0])
    for n in range(10_000):
        s = kf_predict(s, rng.uniform(0.05, 0.6))
        s = kf_update(s, rng.normal(0, 10, 2), rng.normal(0, 2, 2) if n % 2 else None)
        if n % 100 == 0 or n == 9999:
            assert np.max(np.abs(s.cov - s.cov.T)) <= 1e-9
            assert np.linalg.eigvalsh(s.cov)[0] >= -1e-12 * np.max(np.abs(s.cov))


def test_consistency_innovation_covariance():
    """Filter on data drawn from its own model: predicted and empirical innovation covariances agree."""
    rng = np.random.default_rng(3)
    cfg = KalmanConfig(q=0.5, r_pos=0.01, r_acc=0.04)
    dt = 0.2
    f = transition(dt)
    lq = np.linalg.cholesky(process_noise(dt, cfg.q) + 1e-18 * np.eye(6))
    h = np.vstack([np.eye(6)[:2], np.eye(6)[4:6]])
    r = np.diag([cfg.r_pos] * 2 + [cfg.r_acc] * 2)
    x = np.zeros(6)
    s = initial_state([0, 0], cfg)
    n = 100_000
    innov = np.empty((n, 4))
    pred_s = np.zeros((4, 4))
    burn = 100
    for k in range(n):
        x = f @ x + lq @ rng.normal(size=6)
        z = h @ x + rng.normal(size=4) * np.sqrt(np.diag(r))
        s = kf_predict(s, dt, cfg)
        sk = h @ s.cov @ h.T + r
        innov[k] = z - h @ s.mean
        if k >= burn:
            pred_s += sk
        s = kf_update(s, z[:2], z[2:], cfg)
    pred_s /= n - burn
    emp = np.cov(innov[burn:].T)
    rel = np.abs(np.diag(emp) - np.diag(pred_s)) / np.diag(pred_s)
    assert rel.max() < 0.2
