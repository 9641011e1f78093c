"""Live estimation loop.

Each tick ingests the events that arrived since the previous tick, refreshes
grid frames when a GPS fix came in, predicts the next grid frame with the
network and samples a cubic through the window plus that prediction at the
query time. Missing fixes are bridged with the network's own predictions;
CAN speed below the stop threshold freezes the output.
"""

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet, pipeline, polyreg
from .pipeline import GRID_STEP, STOP_SPEED_KMH, WINDOW

NORMAL, COASTING, STOPPED = "normal", "coasting", "stopped"
STAGES = ("regression", "network", "interpolation")


class EstimatorError(RuntimeError):
    pass


class WarmingUpError(EstimatorError):
    pass


class StaleDataError(EstimatorError):
    pass


class NoPriorPredictionError(EstimatorError):
    pass


@dataclass(frozen=True)
class RuntimeConfig:
    tick: float = 0.05
    stop_speed_kmh: float = STOP_SPEED_KMH
    max_coast: int = 10
    imu_stale: float = 0.5
    warmup: float = pipeline.WARMUP
    gps_history: float = 6.0
    imu_history: float = 2.0
    lbfgs: polyreg.LbfgsConfig = polyreg.DEFAULT_LBFGS


@dataclass
class PositionEstimate:
    t: float
    x: float
    y: float
    source: str  # interpolated | predicted-coast | frozen-stop
    latency_ms: float
    degraded: bool = False
    stages_ms: dict = field(default_factory=dict)

    def to_json(self):
        return {"t": self.t, "x": self.x, "y": self.y, "source": self.source,
                "latency_ms": self.latency_ms, "degraded": self.degraded}


@dataclass
class _Frame:
    k: int
    xy: np.ndarray
    ax: float  # vehicle frame
    ay: float
    yaw: float
    provisional: bool = False


class Runtime:
    """Single-stream estimator; one instance per vehicle."""

    def __init__(self, params: neuralnet.ModelParams, cfg: RuntimeConfig = RuntimeConfig()):
        self.params = params
        self.cfg = cfg
        self.step = float(params.meta.get("step", GRID_STEP))
        self._lock = threading.Lock()
        self.gps_t, self.gps_xy = [], []
        self.imu_t, self.imu = [], []
        self.frames = []
        self.k_final = None
        self.prediction = None  # (k, xy, raw predicted frame)
        self.mode = NORMAL
        self.dropouts = 0
        self.anchor = None
        self.last_estimate = None

    # -- ingestion ----------------------------------------------------------

    def _ingest(self, events):
        new_gps = False
        for e in events:
            if e.t < self.cfg.warmup:
                continue
            if e.kind == "gps":
                self.gps_t.append(e.t)
                self.gps_xy.append((e["x"], e["y"]))
                new_gps = True
            elif e.kind == "imu":
                self.imu_t.append(e.t)
                self.imu.append((e["ax"], e["ay"], e["yaw"]))
            elif e.kind == "can":
                self.handle_stop(e["speed"])
        self._prune()
        return new_gps

    def _prune(self):
        if len(self.gps_t) > 2 * pipeline.FIT_MIN_SAMPLES:
            cut = self.gps_t[-1] - self.cfg.gps_history
            n = min(sum(1 for t in self.gps_t if t < cut), len(self.gps_t) - 2 * pipeline.FIT_MIN_SAMPLES)
            if n > 0:
                del self.gps_t[:n], self.gps_xy[:n]
        if self.imu_t and self.imu_t[0] < self.imu_t[-1] - self.cfg.imu_history:
            cut = self.imu_t[-1] - self.cfg.imu_history
            n = sum(1 for t in self.imu_t if t < cut)
            del self.imu_t[:n], self.imu[:n]

    # -- state machine -------------------------------------------------------

    def handle_stop(self, speed_kmh):
        if speed_kmh < self.cfg.stop_speed_kmh:
            if self.mode != STOPPED:
                if self.last_estimate is not None:
                    self.anchor = (self.last_estimate.x, self.last_estimate.y)
                elif self.frames:
                    self.anchor = tuple(self.frames[-1].xy)
                self.mode = STOPPED
        elif self.mode == STOPPED:
            # stale pre-stop frames would bias the cubic: rebuild from the fixes
            self.mode = NORMAL
            self.frames = []
            self.k_final = None
            self.prediction = None
            self.dropouts = 0

    def _imu_arrays(self):
        return np.asarray(self.imu_t), np.asarray(self.imu, dtype=float).reshape(-1, 3)

    def _refresh_grid(self):
        if not self.gps_t or not self.imu_t:
            return
        gt = np.asarray(self.gps_t)
        gxy = np.asarray(self.gps_xy, dtype=float)
        it, iv = self._imu_arrays()
        k_max = int(math.floor(min(gt[-1], it[-1]) / self.step + 1e-9))
        k_lo = k_max - WINDOW + 1
        if self.k_final is not None:
            k_lo = max(k_lo, self.k_final + 1)
        fresh = []
        for k in range(k_lo, k_max + 1):
            g = k * self.step
            try:
                i, j = pipeline.gps_window(gt, g)
                x, y = pipeline.fit_position(gt, gxy, i, j, g, self.cfg.lbfgs)
                ax, ay, yaw = pipeline.imu_at(it, iv, g)
            except pipeline.PipelineError:
                fresh = []
                continue
            fresh.append(_Frame(k, np.array([x, y]), ax, ay, yaw))
        if not fresh:
            return
        kept = [f for f in self.frames if not f.provisional and f.k < fresh[0].k]
        if kept and kept[-1].k != fresh[0].k - 1:
            kept = []
        self.frames = (kept + fresh)[-WINDOW:]
        self.k_final = fresh[-1].k
        self.dropouts = 0
        self.mode = NORMAL
        self.prediction = None

    def _predict(self):
        fr = self.frames[-WINDOW:]
        xy = np.array([f.xy for f in fr])
        ax = np.array([f.ax for f in fr])
        ay = np.array([f.ay for f in fr])
        yaw = np.array([f.yaw for f in fr])
        axg, ayg = pipeline.rotate_to_global(ax, ay, yaw)
        feats = pipeline.window_features(xy, axg, ayg, yaw, self.step)
        raw = neuralnet.predict_future(self.params, feats)
        self.prediction = (fr[-1].k + 1, xy[-1] + raw[:2], raw)

    def handle_dropout(self):
        """Append the previous prediction as a provisional frame and shift the window."""
        if self.prediction is None:
            raise NoPriorPredictionError("GPS dropout before any prediction exists")
        k, xy, _ = self.prediction
        g = k * self.step
        it, iv = self._imu_arrays()
        try:
            ax, ay, yaw = pipeline.imu_at(it, iv, g)
        except pipeline.PipelineError:
            ax, ay, yaw = iv[-1]
        self.frames = (self.frames + [_Frame(k, np.array(xy, dtype=float), ax, ay, yaw, True)])[-WINDOW:]
        self.dropouts += 1
        self.mode = COASTING
        self.prediction = None

    @property
    def warm(self):
        return len(self.frames) >= WINDOW

    # -- ticking ---------------------------------------------------------------

    def tick(self, now, events=()):
        with self._lock:
            return self._tick(now, events)

    def snapshot(self):
        with self._lock:
            return self.last_estimate

    def _tick(self, now, events):
        t_start = time.perf_counter()
        stages = dict.fromkeys(STAGES, 0.0)
        new_gps = self._ingest(events)
        if not self.imu_t and now < self.cfg.warmup + self.cfg.imu_stale:
            raise WarmingUpError(f"inside the {self.cfg.warmup} s sensor warm-up at t={now:.3f}")
        if not self.imu_t or now - self.imu_t[-1] > self.cfg.imu_stale:
            raise StaleDataError(f"newest IMU sample older than {self.cfg.imu_stale} s at t={now:.3f}")

        if self.mode == STOPPED:
            if self.anchor is None:
                raise WarmingUpError("stopped before the first position was available")
            est = PositionEstimate(now, self.anchor[0], self.anchor[1], "frozen-stop",
                                   (time.perf_counter() - t_start) * 1e3, False, stages)
            self.last_estimate = est
            return est

        t0 = time.perf_counter()
        if new_gps or not self.warm:
            self._refresh_grid()
        t1 = time.perf_counter()
        stages["regression"] = (t1 - t0) * 1e3
        if not self.warm:
            raise WarmingUpError(f"{len(self.frames)} of {WINDOW} grid frames available at t={now:.3f}")

        self._predict()
        while now > self.prediction[0] * self.step + 1e-9:
            self.handle_dropout()
            self._predict()
        t2 = time.perf_counter()
        stages["network"] = (t2 - t1) * 1e3

        fr = self.frames[-WINDOW:]
        k0 = fr[0].k
        origin = fr[0].xy
        times = [(f.k - k0) * self.step for f in fr] + [(self.prediction[0] - k0) * self.step]
        pts = [f.xy - origin for f in fr] + [self.prediction[1] - origin]
        cx, cy = polyreg.fit_xy(times, pts, self.cfg.lbfgs)
        tau = now - k0 * self.step
        x = float(origin[0] + polyreg.evaluate(cx, tau))
        y = float(origin[1] + polyreg.evaluate(cy, tau))
        t3 = time.perf_counter()
        stages["interpolation"] = (t3 - t2) * 1e3

        source = "interpolated" if self.dropouts == 0 else "predicted-coast"
        est = PositionEstimate(now, x, y, source, (t3 - t_start) * 1e3,
                               self.dropouts > self.cfg.max_coast, stages)
        self.last_estimate = est
        return est


def run_stream(runtime: Runtime, events, tick=None, t_start=None, t_end=None):
    """Drive ``runtime`` over time-ordered events, consumed lazily.

    Yields ``(t, estimate_or_exception)`` once per tick from the first event
    (or ``t_start``) through the last event (or ``t_end``); warming-up and
    stale-data conditions are yielded as exception instances.
    """
    tick = runtime.cfg.tick if tick is None else tick
    it = iter(events)
    pending = next(it, None)
    if pending is None:
        return
    k = int(math.ceil((pending.t if t_start is None else t_start) / tick - 1e-9))
    last_t = pending.t
    while True:
        now = k * tick
        batch = []
        while pending is not None and pending.t <= now + 1e-12:
            if pending.t < last_t:
                raise ValueError(f"events out of order at t={pending.t}")
            last_t = pending.t
            batch.append(pending)
            pending = next(it, None)
        if pending is None and t_end is None and not batch and now > last_t + 1e-9:
            return
        if t_end is not None and now > t_end + 1e-9:
            return
        try:
            yield now, runtime.tick(now, batch)
        except (WarmingUpError, StaleDataError) as exc:
            yield now, exc
        k += 1


def latency_report(estimates):
    """Per-stage and total p50/p95/max/min/mean in milliseconds."""
    rows = {s: [] for s in STAGES + ("total",)}
    for e in estimates:
        for s in STAGES:
            rows[s].append(e.stages_ms.get(s, 0.0))
        rows["total"].append(e.latency_ms)
    out = {}
    for s, vals in rows.items():
        a = np.asarray(vals, dtype=float)
        if a.size == 0:
            out[s] = {"p50": math.nan, "p95": math.nan, "max": math.nan, "min": math.nan, "mean": math.nan, "n": 0}
            continue
        out[s] = {"p50": float(np.percentile(a, 50)), "p95": float(np.percentile(a, 95)),
                  "max": float(a.max()), "min": float(a.min()), "mean": float(a.mean()), "n": int(a.size)}
    return out


def measure_latency(runtime: Runtime, events, ticks, tick=None):
    """Run up to ``ticks`` warm ticks over ``events`` and report stage timings."""
    got = []
    for _, est in run_stream(runtime, events, tick):
        if isinstance(est, PositionEstimate) and est.source != "frozen-stop":
            got.append(est)
            if len(got) >= ticks:
                break
    return latency_report(got)
