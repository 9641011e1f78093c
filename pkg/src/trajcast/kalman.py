"""Constant-acceleration Kalman filter used as the forecasting baseline."""

from dataclasses import dataclass

import numpy as np

from .pipeline import AX, AY, DX, DY, GRID_STEP


class KalmanError(RuntimeError):
    pass


class SingularInnovationError(KalmanError):
    pass


@dataclass(frozen=True)
class KalmanConfig:
    q: float = 0.5        # jerk spectral density
    r_pos: float = 0.01   # m^2
    r_acc: float = 0.04   # (m/s^2)^2
    init_cov: float = 1e6

    def __post_init__(self):
        if min(self.q, self.r_pos, self.r_acc, self.init_cov) <= 0:
            raise ValueError("Kalman noise parameters must be > 0")


@dataclass
class KalmanState:
    """Mean is [x, y, vx, vy, ax, ay]."""

    mean: np.ndarray
    cov: np.ndarray


_I2 = np.eye(2)


def transition(dt):
    f = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    return np.kron(f, _I2)


def process_noise(dt, q):
    q1 = q * np.array([
        [dt ** 5 / 20, dt ** 4 / 8, dt ** 3 / 6],
        [dt ** 4 / 8, dt ** 3 / 3, dt ** 2 / 2],
        [dt ** 3 / 6, dt ** 2 / 2, dt],
    ])
    return np.kron(q1, _I2)


def initial_state(position, cfg: KalmanConfig = KalmanConfig()) -> KalmanState:
    mean = np.zeros(6)
    mean[:2] = position
    return KalmanState(mean, np.eye(6) * cfg.init_cov)


def kf_predict(state: KalmanState, dt, cfg: KalmanConfig = KalmanConfig()) -> KalmanState:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    f = transition(dt)
    cov = f @ state.cov @ f.T + process_noise(dt, cfg.q)
    return KalmanState(f @ state.mean, 0.5 * (cov + cov.T))


_H_POS = np.eye(6)[:2]
_H_FULL = np.vstack([np.eye(6)[:2], np.eye(6)[4:6]])


def kf_update(state: KalmanState, position, accel=None, cfg: KalmanConfig = KalmanConfig()) -> KalmanState:
    """Joseph-form measurement update with a position and optional acceleration."""
    if accel is None:
        h = _H_POS
        z = np.asarray(position, dtype=float)
        r = np.diag([cfg.r_pos, cfg.r_pos])
    else:
        h = _H_FULL
        z = np.concatenate([np.asarray(position, dtype=float), np.asarray(accel, dtype=float)])
        r = np.diag([cfg.r_pos, cfg.r_pos, cfg.r_acc, cfg.r_acc])
    p = state.cov
    s = h @ p @ h.T + r
    s = 0.5 * (s + s.T)
    eig = np.linalg.eigvalsh(s)
    if not np.all(np.isfinite(eig)) or eig[0] <= 1e-14 * max(eig[-1], 1e-300):
        raise SingularInnovationError("innovation covariance is numerically singular")
    k = np.linalg.solve(s, h @ p).T
    innov = z - h @ state.mean
    a = np.eye(6) - k @ h
    cov = a @ p @ a.T + k @ r @ k.T
    return KalmanState(state.mean + k @ innov, 0.5 * (cov + cov.T))


def kf_forecast_window(positions, accels, cfg: KalmanConfig = KalmanConfig(), step=GRID_STEP, horizon=None):
    """Filter through the window, then predict ``horizon`` past the last frame.

    Returns the predicted absolute position.
    """
    positions = np.asarray(positions, dtype=float)
    accels = np.asarray(accels, dtype=float)
    horizon = step if horizon is None else horizon
    st = initial_state(positions[0], cfg)
    st = kf_update(st, positions[0], accels[0], cfg)
    for p, a in zip(positions[1:], accels[1:]):
        st = kf_predict(st, step, cfg)
        st = kf_update(st, p, a, cfg)
    return kf_predict(st, horizon, cfg).mean[:2]


def forecast_frames(frames, cfg: KalmanConfig = KalmanConfig(), step=GRID_STEP):
    """Predicted (dx, dy) after an (8, 6) feature window, relative to its last position."""
    frames = np.asarray(frames, dtype=float)
    pos = np.cumsum(frames[:, DX:DY + 1], axis=0)
    pred = kf_forecast_window(pos, frames[:, AX:AY + 1], cfg, step)
    return pred - pos[-1]
