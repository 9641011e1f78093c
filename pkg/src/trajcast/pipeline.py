"""Asynchronous sensor events -> uniform grid frames -> 8-frame training sequences."""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import polyreg
from .simgen import wrap_angle

GRID_STEP = 0.2
WINDOW = 8
FIT_MIN_SAMPLES = 10
FIT_MIN_SPAN = 2.0
IMU_MAX_GAP = 0.5
WARMUP = 2.0
STOP_SPEED_KMH = 0.15
TURN_YAW_RATE = 0.05
TURN_LATERAL_ACCEL = 0.5

DX, DY, AX, AY, YAW, TS = range(6)
N_FEATURES = 6
FEATURE_NAMES = ("dx", "dy", "ax_g", "ay_g", "yaw", "ts")


class PipelineError(ValueError):
    pass


class InsufficientCoverageError(PipelineError):
    pass


class ImuGapError(PipelineError):
    pass


class TooFewFramesError(PipelineError):
    pass


def discard_warmup(events, warmup=WARMUP):
    return [e for e in events if e.t >= warmup]


def rotate_to_global(ax_v, ay_v, yaw):
    """Rotate vehicle-frame accelerations by +yaw into the plane frame."""
    c, s = np.cos(yaw), np.sin(yaw)
    return c * ax_v - s * ay_v, s * ax_v + c * ay_v


@dataclass
class Streams:
    gps_t: np.ndarray
    gps_xy: np.ndarray
    imu_t: np.ndarray
    imu: np.ndarray  # columns ax, ay, yaw (vehicle frame)
    can_t: np.ndarray
    can_speed: np.ndarray


def split_streams(events) -> Streams:
    g = [(e.t, e["x"], e["y"]) for e in events if e.kind == "gps"]
    i = [(e.t, e["ax"], e["ay"], e["yaw"]) for e in events if e.kind == "imu"]
    c = [(e.t, e["speed"]) for e in events if e.kind == "can"]
    g = np.array(g, dtype=float).reshape(-1, 3)
    i = np.array(i, dtype=float).reshape(-1, 4)
    c = np.array(c, dtype=float).reshape(-1, 2)
    for name, arr in (("gps", g), ("imu", i), ("can", c)):
        if np.any(np.diff(arr[:, 0]) < 0):
            raise PipelineError(f"{name} stream not time-sorted")
    return Streams(g[:, 0], g[:, 1:3], i[:, 0], i[:, 1:4], c[:, 0], c[:, 1])


def gps_window(gps_t, g, min_samples=FIT_MIN_SAMPLES, min_span=FIT_MIN_SPAN):
    """Index range [i, j] of the fit window for grid time ``g``.

    ``j`` is the first fix at or after ``g`` (so ``g`` is interpolated, and
    the window only uses fixes available once ``g`` has been passed); ``i``
    reaches back until the window has ``min_samples`` fixes spanning
    ``min_span`` seconds.
    """
    j = int(np.searchsorted(gps_t, g, side="left"))
    if j >= len(gps_t):
        raise InsufficientCoverageError(f"no GPS fix at or after t={g:.3f}")
    i_count = j - min_samples + 1
    i_span = int(np.searchsorted(gps_t, gps_t[j] - min_span, side="right")) - 1
    i = min(i_count, i_span)
    if i < 0:
        raise InsufficientCoverageError(
            f"GPS history before t={g:.3f} shorter than {min_samples} fixes / {min_span} s")
    return i, j


def fit_position(gps_t, gps_xy, i, j, g, cfg=polyreg.DEFAULT_LBFGS):
    t = gps_t[i:j + 1]
    base_t = t[0]
    base_xy = gps_xy[i]
    cx, cy = polyreg.fit_xy(t - base_t, gps_xy[i:j + 1] - base_xy, cfg)
    tau = g - base_t
    return base_xy[0] + polyreg.evaluate(cx, tau), base_xy[1] + polyreg.evaluate(cy, tau)


def imu_at(imu_t, imu, g, max_gap=IMU_MAX_GAP):
    """Linear interpolation of (ax, ay, yaw) at ``g``; yaw interpolated on the circle."""
    k = int(np.searchsorted(imu_t, g, side="left"))
    if k < len(imu_t) and imu_t[k] == g:
        return imu[k, 0], imu[k, 1], imu[k, 2]
    if k == 0 or k >= len(imu_t):
        raise InsufficientCoverageError(f"no IMU samples bracketing t={g:.3f}")
    t0, t1 = imu_t[k - 1], imu_t[k]
    if t1 - t0 > max_gap:
        raise ImuGapError(f"IMU gap {t1 - t0:.3f} s around t={g:.3f}")
    w = (g - t0) / (t1 - t0)
    a, b = imu[k - 1], imu[k]
    dyaw = float(wrap_angle(b[2] - a[2]))
    yaw = float(wrap_angle(a[2] + w * dyaw))
    return a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1]), yaw


def can_at(can_t, can_speed, g):
    """Latest CAN speed at or before ``g`` (NaN when none)."""
    k = int(np.searchsorted(can_t, g, side="right")) - 1
    return float(can_speed[k]) if k >= 0 else math.nan


@dataclass
class GridFrames:
    """Absolute per-grid-point quantities; time of row n is ``k[n] * step``."""

    k: np.ndarray
    step: float
    xy: np.ndarray
    ax: np.ndarray  # vehicle frame
    ay: np.ndarray
    yaw: np.ndarray
    speed: np.ndarray

    @property
    def t(self):
        return self.k * self.step

    def __len__(self):
        return len(self.k)

    def global_accel(self):
        return rotate_to_global(self.ax, self.ay, self.yaw)


def grid_frame(streams: Streams, g, cfg=polyreg.DEFAULT_LBFGS):
    """All grid quantities at time ``g``: (x, y, ax_v, ay_v, yaw, speed)."""
    i, j = gps_window(streams.gps_t, g)
    x, y = fit_position(streams.gps_t, streams.gps_xy, i, j, g, cfg)
    ax, ay, yaw = imu_at(streams.imu_t, streams.imu, g)
    return x, y, ax, ay, yaw, can_at(streams.can_t, streams.can_speed, g)


def coverable_range(streams: Streams, step=GRID_STEP):
    """First and last grid index that the streams can populate."""
    gt = streams.gps_t
    if len(gt) < FIT_MIN_SAMPLES or len(streams.imu_t) < 2:
        raise InsufficientCoverageError("too few GPS or IMU samples")
    # earliest j with a complete window, then the first grid point it can serve
    j0 = FIT_MIN_SAMPLES - 1
    while j0 < len(gt) and gt[j0] - gt[0] < FIT_MIN_SPAN:
        j0 += 1
    if j0 >= len(gt):
        raise InsufficientCoverageError(f"GPS track shorter than {FIT_MIN_SPAN} s")
    k_first = int(math.floor(gt[j0 - 1] / step + 1e-9)) + 1
    k_first = max(k_first, int(math.ceil(streams.imu_t[0] / step - 1e-9)))
    k_last = int(math.floor(min(gt[-1], streams.imu_t[-1]) / step + 1e-9))
    return k_first, k_last


def resample(events, grid_step=GRID_STEP, grid=None, cfg=polyreg.DEFAULT_LBFGS) -> GridFrames:
    """Uniform-grid frames from raw events.

    ``grid`` is an optional sequence of integer grid indices; by default every
    coverable index is produced.
    """
    s = split_streams(events)
    if grid is None:
        k0, k1 = coverable_range(s, grid_step)
        grid = np.arange(k0, k1 + 1)
    grid = np.asarray(grid, dtype=int)
    rows = np.array([grid_frame(s, k * grid_step, cfg) for k in grid], dtype=float).reshape(-1, 6)
    return GridFrames(grid, grid_step, rows[:, 0:2], rows[:, 2], rows[:, 3], rows[:, 4], rows[:, 5])


def window_features(xy, ax_g, ay_g, yaw, step=GRID_STEP):
    """(n, 6) feature block for consecutive grid rows; first delta is zeroed."""
    n = len(xy)
    out = np.empty((n, N_FEATURES))
    out[0, DX:DY + 1] = 0.0
    out[1:, DX:DY + 1] = np.diff(xy, axis=0)
    out[:, AX] = ax_g
    out[:, AY] = ay_g
    out[:, YAW] = yaw
    out[:, TS] = np.arange(n) * step
    return out


def annotate(yaw, ay_v, step=GRID_STEP):
    """'turn' when yaw rate or lateral acceleration exceeds its threshold."""
    yaw_rate = np.abs(wrap_angle(np.diff(np.asarray(yaw, dtype=float)))) / step
    lat = np.abs(np.asarray(ay_v, dtype=float))
    if (len(yaw_rate) and yaw_rate.max() > TURN_YAW_RATE) or lat.max() > TURN_LATERAL_ACCEL:
        return "turn"
    return "straight"


@dataclass
class Sequence:
    frames: np.ndarray  # (8, 6)
    target: np.ndarray  # (6,)
    label: str
    origin: np.ndarray  # absolute position of the first frame
    t0: float
    step: float = GRID_STEP
    route: str = ""
    route_type: str = ""
    stationary: bool = False

    @property
    def positions(self):
        """Absolute window positions rebuilt from the deltas."""
        return self.origin + np.cumsum(self.frames[:, DX:DY + 1], axis=0)

    @property
    def t_last(self):
        return self.t0 + (len(self.frames) - 1) * self.step

    @property
    def t_target(self):
        return self.t0 + len(self.frames) * self.step

    def to_json(self):
        return {
            "frames": self.frames.tolist(),
            "target": self.target.tolist(),
            "label": self.label,
            "origin": self.origin.tolist(),
            "t0": self.t0,
            "step": self.step,
            "route": self.route,
            "route_type": self.route_type,
            "stationary": self.stationary,
        }

    @classmethod
    def from_json(cls, obj):
        frames = np.array(obj["frames"], dtype=float)
        target = np.array(obj["target"], dtype=float)
        if frames.shape != (WINDOW, N_FEATURES) or target.shape != (N_FEATURES,):
            raise PipelineError(f"bad sequence shapes {frames.shape}, {target.shape}")
        if obj["label"] not in ("straight", "turn"):
            raise PipelineError(f"bad label {obj['label']!r}")
        return cls(frames, target, obj["label"],
                   np.array(obj.get("origin", (0.0, 0.0)), dtype=float),
                   float(obj.get("t0", 0.0)), float(obj.get("step", GRID_STEP)),
                   obj.get("route", ""), obj.get("route_type", ""), bool(obj.get("stationary", False)))


def build_sequences(frames: GridFrames, window=WINDOW, stride=1, route="", route_type=""):
    n = len(frames)
    if n < window:
        raise TooFewFramesError(f"{n} grid frames, need at least {window}")
    if np.any(np.diff(frames.k) != 1):
        raise PipelineError("grid frames are not consecutive")
    axg, ayg = frames.global_accel()
    stopped = frames.speed < STOP_SPEED_KMH
    out = []
    for s in range(0, n - window, stride):
        sl = slice(s, s + window + 1)
        feats = window_features(frames.xy[sl], axg[sl], ayg[sl], frames.yaw[sl], frames.step)
        out.append(Sequence(
            frames=feats[:window],
            target=feats[window],
            label=annotate(frames.yaw[s:s + window], frames.ay[s:s + window], frames.step),
            origin=frames.xy[s].copy(),
            t0=float(frames.k[s] * frames.step),
            step=frames.step,
            route=route,
            route_type=route_type,
            stationary=bool(np.all(stopped[sl])),
        ))
    return out


def balance(sequences):
    turns = [s for s in sequences if s.label == "turn"]
    n_turn, n_straight = len(turns), len(sequences) - len(turns)
    if n_turn == 0 or n_turn >= n_straight:
        return list(sequences)
    copies = -(-n_straight // n_turn)
    return list(sequences) + turns * (copies - 1)


def route_sequences(route, name="", grid_step=GRID_STEP, warmup=WARMUP, cfg=polyreg.DEFAULT_LBFGS):
    frames = resample(discard_warmup(route.events, warmup), grid_step, cfg=cfg)
    return build_sequences(frames, route=name, route_type=route.route_type)


def write_dataset(path, sequences):
    with open(path, "w") as fh:
        for s in sequences:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_dataset(path):
    out = []
    with open(Path(path)) as fh:
        for n, line in enumerate(fh, start=1):
            try:
                out.append(Sequence.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PipelineError(f"{path}:{n}: bad sequence ({exc})") from None
    return out
