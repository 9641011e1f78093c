"""Scoring against simulator truth: 200 ms forecasts and live runtime estimates."""

import math

import numpy as np

from . import kalman, neuralnet, pipeline, runtime, simgen

TRACE_COLUMNS = ("route", "route_type", "label", "t", "truth_x", "truth_y",
                 "est_x", "est_y", "kalman_x", "kalman_y")


def forecast_rows(params, route, name="", kcfg=kalman.KalmanConfig()):
    """One row per non-stationary sequence: truth, network and Kalman positions at the target time."""
    step = float(params.meta.get("step", pipeline.GRID_STEP))
    seqs = [s for s in pipeline.route_sequences(route, name, grid_step=step) if not s.stationary]
    if not seqs:
        return []
    pred = neuralnet.predict_future(params, np.stack([s.frames for s in seqs]))
    rows = []
    for s, p in zip(seqs, pred):
        last = s.positions[-1]
        tx, ty = route.truth.position(s.t_target)
        kx, ky = last + kalman.forecast_frames(s.frames, kcfg, step)
        rows.append({
            "route": name, "route_type": route.route_type, "label": s.label, "t": s.t_target,
            "truth_x": float(tx), "truth_y": float(ty),
            "est_x": float(last[0] + p[pipeline.DX]), "est_y": float(last[1] + p[pipeline.DY]),
            "kalman_x": float(kx), "kalman_y": float(ky),
        })
    return rows


def row_errors(rows, which="est"):
    return np.array([math.hypot(r[f"{which}_x"] - r["truth_x"], r[f"{which}_y"] - r["truth_y"]) for r in rows])


def _stats_cm(err):
    if len(err) == 0:
        return {"n": 0, "mean_cm": math.nan, "median_cm": math.nan, "p95_cm": math.nan}
    err = np.asarray(err) * 100.0
    return {"n": int(len(err)), "mean_cm": float(err.mean()),
            "median_cm": float(np.median(err)), "p95_cm": float(np.percentile(err, 95))}


def summarize(rows):
    """Per-route-type and overall error statistics (centimetres) for network and Kalman."""
    types = sorted({r["route_type"] for r in rows})
    per_type = {}
    for t in types:
        sub = [r for r in rows if r["route_type"] == t]
        per_type[t] = {"network": _stats_cm(row_errors(sub, "est")),
                       "kalman": _stats_cm(row_errors(sub, "kalman"))}
    net = _stats_cm(row_errors(rows, "est"))
    kf = _stats_cm(row_errors(rows, "kalman"))
    ratio = net["mean_cm"] / kf["mean_cm"] if rows and kf["mean_cm"] > 0 else math.nan
    ordering = sorted(types, key=lambda t: per_type[t]["network"]["mean_cm"], reverse=True)
    return {
        "per_route_type": per_type,
        "overall": {"network": net, "kalman": kf, "network_to_kalman": ratio},
        "route_type_ordering": ordering,
        "sequence_counts": {t: per_type[t]["network"]["n"] for t in types} | {"total": len(rows)},
    }


def runtime_errors(params, route, cfg=runtime.RuntimeConfig()):
    """Run the live loop over a route; returns (estimates, errors in m, ticks without estimate)."""
    rt = runtime.Runtime(params, cfg)
    ests, errs, missing = [], [], 0
    warm = False
    for t, est in runtime.run_stream(rt, route.events, t_end=route.truth.t[-1]):
        if isinstance(est, Exception):
            if warm:
                missing += 1
            continue
        warm = True
        ests.append(est)
        errs.append(math.hypot(est.x - route.truth.position(t)[0], est.y - route.truth.position(t)[1]))
    return ests, np.array(errs), missing


def with_dropout(route_spec: simgen.RouteSpec, prob):
    """Same route and noise draws, with GPS fixes dropped at probability ``prob``."""
    spec = simgen.RouteSpec.from_json(route_spec.to_json())
    spec.sensor.gps_dropout_prob = prob
    return simgen.generate(spec)


def evaluate_routes(params, routes, names=None, kcfg=kalman.KalmanConfig(),
                    rcfg=runtime.RuntimeConfig(), run_live=True):
    """Full report plus forecast trace rows for a list of routes."""
    names = names or [f"route{n}" for n in range(len(routes))]
    rows = []
    live_err, live_ests, missing = [], [], 0
    for route, name in zip(routes, names):
        rows += forecast_rows(params, route, name, kcfg)
        if run_live:
            ests, errs, miss = runtime_errors(params, route, rcfg)
            live_ests += ests
            live_err.append(errs)
            missing += miss
    report = summarize(rows)
    if run_live:
        errs = np.concatenate(live_err) if live_err else np.array([])
        report["runtime"] = {"estimates": _stats_cm(errs), "ticks_without_estimate": missing,
                             "tick_ms": rcfg.tick * 1e3}
        report["latency_ms"] = runtime.latency_report([e for e in live_ests if e.source != "frozen-stop"])
    report["config"] = {
        "kalman": {"q": kcfg.q, "r_pos": kcfg.r_pos, "r_acc": kcfg.r_acc, "init_cov": kcfg.init_cov},
        "model": {"hidden": params.config.hidden, "encoder": list(params.config.encoder),
                  "decoder": list(params.config.decoder), "layers": params.config.layers},
        "step_s": float(params.meta.get("step", pipeline.GRID_STEP)),
        "routes": list(names),
    }
    return report, rows
