import math
import threading

import numpy as np
import pytest

from trajcast import polyreg, runtime, simgen
from trajcast.runtime import (COASTING, NORMAL, STOPPED, NoPriorPredictionError, PositionEstimate, Runtime,
                              RuntimeConfig, StaleDataError, WarmingUpError, latency_report, run_stream)
from trajcast.simgen import RouteSpec, SensorConfig, archetype_spec, generate


def line_route(seed=0, noise=0.1, length=200.0, speed=10.0):
    sensor = SensorConfig(gps_noise_sigma=noise)
    return generate(RouteSpec([{"type": "straight", "length": length, "speed": speed}], seed=seed, sensor=sensor))


def drive(rt, route, t_end=None):
    return list(run_stream(rt, route.events, t_end=t_end))


def test_warmup_then_estimates(quick_model):
    out = drive(Runtime(quick_model), line_route())
    kinds = [type(e) for _, e in out]
    first = kinds.index(PositionEstimate)
    assert first > 0
    assert all(issubclass(k, WarmingUpError) for k in kinds[:first])
    assert all(k is PositionEstimate for k in kinds[first:])


def test_tick_cadence(quick_model):
    route = line_route()
    out = drive(Runtime(quick_model), route)
    ts = np.array([t for t, _ in out])
    assert np.allclose(np.diff(ts), 0.05)


def test_constant_velocity_tracking(quick_model):
    route = line_route()
    ests = [e for _, e in drive(Runtime(quick_model), route) if isinstance(e, PositionEstimate)]
    err = [math.hypot(e.x - 10 * e.t, e.y) for e in ests]
    assert np.mean(err) < 0.3


def test_total_gps_loss_keeps_emitting(quick_model):
    """100% dropout after warm-up: one estimate per tick, degraded after more than 10 coasts."""
    route = line_route(length=150.0)
    cut = 8.0
    events = [e for e in route.events if e.kind != "gps" or e.t < cut]
    out = list(run_stream(Runtime(quick_model), events, t_end=route.truth.t[-1]))
    after = [(t, e) for t, e in out if t > cut]
    assert after and all(isinstance(e, PositionEstimate) for _, e in after)
    coasting = [e for _, e in after if e.source == "predicted-coast"]
    assert coasting
    assert any(e.degraded for e in coasting)
    assert not any(e.degraded for _, e in after[:5])


def test_dropout_frame_is_prediction():
    params = _fake_params()
    rt = Runtime(params)
    rt.imu_t = [0.0, 10.0]
    rt.imu = [(0.0, 0.0, 0.0)] * 2
    rt.frames = [runtime._Frame(k, np.array([float(k), 0.0]), 0.0, 0.0, 0.0) for k in range(8)]
    rt.prediction = (8, np.array([7.0, 0.0]) + [1.0, 0.0], np.r_[1.0, 0.0, 0, 0, 0, 0])
    rt.handle_dropout()
    assert rt.frames[-1].provisional and rt.frames[-1].k == 8
    assert np.array_equal(rt.frames[-1].xy - rt.frames[-2].xy, [1.0, 0.0])
    assert rt.mode == COASTING and rt.dropouts == 1
    with pytest.raises(NoPriorPredictionError):
        rt.handle_dropout()


def _fake_params():
    from trajcast import neuralnet
    return neuralnet.zero_params(neuralnet.ModelConfig())


def test_gps_return_resets_mode(quick_model):
    route = line_route(length=200.0)
    gap = (8.0, 9.0)
    events = [e for e in route.events if not (e.kind == "gps" and gap[0] <= e.t < gap[1])]
    rt = Runtime(quick_model)
    seen_coast = False
    for t, e in run_stream(rt, events):
        if gap[0] < t < gap[1] and isinstance(e, PositionEstimate) and rt.mode == COASTING:
            seen_coast = True
        if t > gap[1] + 0.7:
            break
    assert seen_coast
    assert rt.mode == NORMAL and rt.dropouts == 0


def test_stop_freeze_and_resume(quick_model):
    route = generate(archetype_spec("start_stop", 4))
    rt = Runtime(quick_model)
    out = drive(rt, route)
    frozen = [e for _, e in out if isinstance(e, PositionEstimate) and e.source == "frozen-stop"]
    assert len(frozen) > 20
    # every stop run is bitwise constant
    runs, cur = [], []
    for _, e in out:
        if isinstance(e, PositionEstimate) and e.source == "frozen-stop":
            cur.append((e.x, e.y))
        elif cur:
            runs.append(cur)
            cur = []
    assert runs
    for r in runs:
        assert len(set(r)) == 1
    # estimates resume after the stop
    assert isinstance(out[-1][1], (PositionEstimate, WarmingUpError))
    assert any(isinstance(e, PositionEstimate) and e.source == "interpolated" and t > route.truth.joins[-1]
               for t, e in out)


def test_stop_threshold_boundary():
    rt = Runtime(_fake_params())
    rt.handle_stop(0.15)
    assert rt.mode == NORMAL
    rt.handle_stop(0.10)
    assert rt.mode == STOPPED
    rt.handle_stop(30.0)
    assert rt.mode == NORMAL


def test_stopped_bitwise_1000_ticks():
    rt = Runtime(_fake_params())
    rt.last_estimate = PositionEstimate(1.0, 12.345678901234, -3.21, "interpolated", 0.0)
    rt.handle_stop(0.10)
    first = None
    for n in range(1000):
        t = 5.0 + 0.05 * n
        e = rt.tick(t, [simgen.imu(t, 0.0, 0.0, 0.0), simgen.can(t, 0.1)])
        first = first or (e.x, e.y)
        assert (e.x, e.y) == first == (12.345678901234, -3.21)
        assert e.source == "frozen-stop"


def test_stale_imu():
    rt = Runtime(_fake_params())
    with pytest.raises(StaleDataError):
        rt.tick(3.0, [simgen.imu(2.1, 0, 0, 0)])
    with pytest.raises(WarmingUpError):
        Runtime(_fake_params()).tick(0.5, [])


def test_events_out_of_order():
    ev = [simgen.can(1.0, 5.0), simgen.can(0.5, 5.0)]
    with pytest.raises(ValueError):
        list(run_stream(Runtime(_fake_params()), ev))


def test_interpolation_endpoints(quick_model):
    """At the last grid time the estimate is the fitted curve; at +0.2 s it is near the prediction."""
    route = line_route(seed=3)
    rt = Runtime(quick_model)
    it = run_stream(rt, route.events)
    for t, e in it:
        if isinstance(e, PositionEstimate) and t > 10:
            break
    fr = rt.frames[-8:]
    k0 = fr[0].k
    times = [(f.k - k0) * 0.2 for f in fr] + [(rt.prediction[0] - k0) * 0.2]
    pts = np.array([f.xy for f in fr] + [rt.prediction[1]])
    cx, cy = polyreg.fit_xy(times, pts - pts[0])
    resid = np.hypot(polyreg.evaluate(cx, np.array(times)) - (pts - pts[0])[:, 0],
                     polyreg.evaluate(cy, np.array(times)) - (pts - pts[0])[:, 1])
    assert resid.max() < 0.2
    # an estimate at the prediction time equals the curve's endpoint, within that residual
    at_pred = np.array([polyreg.evaluate(cx, times[-1]), polyreg.evaluate(cy, times[-1])]) + pts[0]
    assert np.hypot(*(at_pred - pts[-1])) <= resid.max() + 1e-9
    at_last = np.array([polyreg.evaluate(cx, times[-2]), polyreg.evaluate(cy, times[-2])]) + pts[0]
    assert np.hypot(*(at_last - pts[-2])) <= resid.max() + 1e-9


def test_estimate_continuity(quick_model):
    route = generate(archetype_spec("turn", 21))
    vmax = float(np.max(np.hypot(route.truth.vx, route.truth.vy)))
    ests = [e for _, e in drive(Runtime(quick_model), route) if isinstance(e, PositionEstimate)]
    jumps = [math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(ests, ests[1:]) if b.t - a.t < 0.051]
    assert max(jumps) <= vmax * 0.05 + 0.5


def test_latency_report_schema(quick_model):
    ests = [e for _, e in drive(Runtime(quick_model), line_route(length=80.0)) if isinstance(e, PositionEstimate)]
    rep = latency_report(ests)
    assert set(rep) == set(runtime.STAGES) | {"total"}
    assert runtime.STAGES == ("regression", "network", "interpolation")
    assert rep["total"]["min"] >= sum(rep[s]["min"] for s in runtime.STAGES)
    for s in rep.values():
        assert s["min"] <= s["p50"] <= s["p95"] <= s["max"]
    empty = latency_report([])
    assert empty["total"]["n"] == 0


def test_concurrent_snapshot(quick_model):
    route = line_route(length=80.0)
    rt = Runtime(quick_model)
    stop = threading.Event()
    snaps = []

    def reader():
        while not stop.is_set():
            snaps.append(rt.snapshot())

    th = threading.Thread(target=reader)
    th.start()
    try:
        drive(rt, route)
    finally:
        stop.set()
        th.join()
    assert snaps and rt.snapshot() is not None


def test_estimate_json():
    e = PositionEstimate(1.0, 2.0, 3.0, "interpolated", 1.5, False, {"network": 0.2})
    assert e.to_json() == {"t": 1.0, "x": 2.0, "y": 3.0, "source": "interpolated", "latency_ms": 1.5,
                           "degraded": False}
