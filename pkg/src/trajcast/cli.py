"""Command-line entry point: ``trajcast <command> ...``."""

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation, neuralnet, pipeline, runtime, simgen


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _fail(kind, message):
    raise CliError(kind, message)


def _need_file(path):
    p = Path(path)
    if not p.is_file():
        _fail("file-not-found", f"{p} does not exist")
    return p


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            out.update(_flatten(v, f"{prefix}{k}."))
        return out
    return {prefix[:-1]: obj}


def _emit_report(report, fmt, path=None):
    if fmt == "json":
        _dump_json(report, path)
        return
    flat = _flatten(report)
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k in sorted(flat):
            v = flat[k]
            w.writerow([k, json.dumps(v, default=_json_default) if isinstance(v, list) else v])
    finally:
        if path:
            fh.close()


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(_need_file(path).read_text())
    except json.JSONDecodeError as exc:
        _fail("schema-validation", f"{path}: invalid JSON ({exc.msg})")
    if not isinstance(cfg, dict):
        _fail("schema-validation", f"{path}: config must be a JSON object")
    return cfg


def _dataclass_from(cls, values, where):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        _fail("schema-validation", f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        _fail("schema-validation", f"{where}: {exc}")


def _read_route(path):
    _need_file(path)
    _need_file(simgen.truth_path(path))
    try:
        return simgen.read_route(path)
    except simgen.VersionMismatchError as exc:
        _fail("version-mismatch", str(exc))
    except simgen.RouteFileError as exc:
        _fail("schema-validation", str(exc))


def _load_checkpoint(path):
    _need_file(path)
    try:
        return neuralnet.load_checkpoint(path)
    except neuralnet.CheckpointError as exc:
        _fail("checkpoint-version" if "version" in str(exc) else "schema-validation", str(exc))


def _runtime_cfg(args):
    return runtime.RuntimeConfig(tick=args.tick_ms / 1000.0)


# --- commands -------------------------------------------------------------------


def cmd_simulate(args):
    if args.archetype:
        spec = simgen.archetype_spec(args.archetype, args.seed, duration_scale=args.duration_scale)
    elif args.spec:
        try:
            spec = simgen.RouteSpec.from_json(json.loads(_need_file(args.spec).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            _fail("schema-validation", f"{args.spec}: bad route spec ({exc})")
        spec.seed = args.seed
    else:
        _fail("usage", "either a spec file or --archetype is required")
    if args.gps_dropout is not None:
        spec.sensor.gps_dropout_prob = args.gps_dropout
    try:
        route = simgen.generate(spec)
    except simgen.RouteSpecError as exc:
        _fail("schema-validation", str(exc))
    simgen.write_route(route, args.out)
    return {"route": str(args.out), "events": len(route.events), "duration_s": float(route.truth.t[-1])}


def cmd_preprocess(args):
    step = args.horizon_ms / 1000.0
    seqs = []
    for path in args.routes:
        route = _read_route(path)
        try:
            got = pipeline.route_sequences(route, Path(path).name, grid_step=step)
        except pipeline.PipelineError as exc:
            _fail("schema-validation", f"{path}: {exc}")
        seqs += [s for s in got if not s.stationary]
    pipeline.write_dataset(args.out, seqs)
    return {"dataset": str(args.out), "sequences": len(seqs),
            "turn": sum(s.label == "turn" for s in seqs)}


def cmd_train(args):
    cfg = _load_config(args.config)
    tcfg = dict(cfg.get("train", {}))
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    train_cfg = _dataclass_from(neuralnet.TrainConfig, tcfg, "train")
    model_cfg = _dataclass_from(neuralnet.ModelConfig, cfg.get("model", {}), "model")
    try:
        seqs = pipeline.read_dataset(_need_file(args.dataset))
    except pipeline.PipelineError as exc:
        _fail("schema-validation", str(exc))
    if not seqs:
        _fail("schema-validation", f"{args.dataset}: empty dataset")
    log = None
    if args.verbose:
        def log(h):
            print(json.dumps(h), file=sys.stderr)
    params, history = neuralnet.train(seqs, train_cfg, model_cfg, seed=args.seed, log=log)
    neuralnet.save_checkpoint(params, args.out)
    hist_path = Path(args.history or str(args.out) + ".history.csv")
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])
    final = history[-1] if history else {}
    return {"checkpoint": str(args.out), "history": str(hist_path), "epochs": len(history),
            "train_loss": final.get("train_loss"), "val_loss": final.get("val_loss")}


def cmd_evaluate(args):
    params = _load_checkpoint(args.checkpoint)
    routes = [_read_route(p) for p in args.routes]
    names = [Path(p).name for p in args.routes]
    report, rows = evaluation.evaluate_routes(params, routes, names, rcfg=_runtime_cfg(args),
                                              run_live=not args.no_runtime)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"report.{args.format}"
    _emit_report(report, args.format, report_path)
    trace_path = out_dir / "trace.csv"
    with open(trace_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=evaluation.TRACE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    figures = []
    if not args.no_figures:
        from . import plotting
        figures = [str(p) for p in plotting.render_report(report, rows, out_dir / "figures")]
    ov = report["overall"]
    return {"report": str(report_path), "trace": str(trace_path), "figures": figures,
            "network_mean_cm": ov["network"]["mean_cm"], "kalman_mean_cm": ov["kalman"]["mean_cm"]}


def _stdin_events(lines):
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        obj = None
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            pass
        if isinstance(obj, dict) and "format" in obj:
            try:
                simgen.parse_header(line, "<stdin>", n)
            except simgen.VersionMismatchError as exc:
                _fail("version-mismatch", str(exc))
            except simgen.RouteFileError as exc:
                _fail("schema-validation", str(exc))
            continue
        try:
            yield simgen.parse_event(line, "<stdin>", n)
        except simgen.RouteFileError as exc:
            _fail("schema-validation", str(exc))


def cmd_stream(args, stdin=None, stdout=None):
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    params = _load_checkpoint(args.checkpoint)
    rt = runtime.Runtime(params, _runtime_cfg(args))
    for t, est in runtime.run_stream(rt, _stdin_events(stdin)):
        if isinstance(est, Exception):
            status = "warming-up" if isinstance(est, runtime.WarmingUpError) else "stale-data"
            rec = {"t": t, "status": status}
        else:
            rec = est.to_json()
        stdout.write(json.dumps(rec) + "\n")
    stdout.flush()
    return None


def bench_route(ticks, cfg, seed):
    """A "turn" route long enough to give ``ticks`` warm ticks."""
    need = ticks * cfg.tick + 2 * cfg.warmup + 5.0
    scale = 1.0
    while True:
        route = simgen.generate(simgen.archetype_spec("turn", seed, duration_scale=scale))
        if route.truth.t[-1] >= need:
            return route
        scale *= 1.1 * need / route.truth.t[-1]


def cmd_bench(args):
    params = _load_checkpoint(args.checkpoint)
    cfg = _runtime_cfg(args)
    route = bench_route(args.ticks, cfg, args.seed)
    rt = runtime.Runtime(params, cfg)
    rep = runtime.measure_latency(rt, route.events, args.ticks)
    report = {"ticks": rep["total"]["n"], "tick_ms": cfg.tick * 1e3, "stages_ms": rep,
              "route_s": float(route.truth.t[-1]), "seed": args.seed}
    _emit_report(report, args.format, args.out)
    return None if args.out is None else {"report": str(args.out)}


def build_parser():
    ap = argparse.ArgumentParser(prog="trajcast", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--tick-ms", type=float, default=50.0)
        p.add_argument("--horizon-ms", type=float, default=200.0)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("simulate", help="generate a synthetic route file")
    p.add_argument("spec", nargs="?", help="route spec JSON (segments, sensor, route_type)")
    p.add_argument("--archetype", choices=simgen.ROUTE_TYPES)
    p.add_argument("--duration-scale", type=float, default=1.0)
    p.add_argument("--gps-dropout", type=float, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="route files -> sequence dataset (JSON Lines)")
    p.add_argument("routes", nargs="+")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--history", default=None)
    p.add_argument("--verbose", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against route truth and the Kalman baseline")
    p.add_argument("checkpoint")
    p.add_argument("routes", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--no-runtime", action="store_true")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stream", help="stdin route events -> stdout position estimates")
    p.add_argument("checkpoint")
    common(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="per-stage latency report")
    p.add_argument("checkpoint")
    p.add_argument("--ticks", type=int, default=10000)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if result is not None:
        print(json.dumps(result, default=_json_default, sort_keys=True), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
