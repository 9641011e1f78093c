"""Synthetic routes: kinematic ground truth plus GPS/IMU/CAN event streams.

Routes are chains of analytic segments (straight, circular turn, roundabout,
stop, straight-line acceleration). Position and heading are continuous across
joins; speed must be continuous too, so speed changes go through explicit
``accelerate`` segments.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "traj-route"
FORMAT_VERSION = 1
TRUTH_STEP = 1e-3
TRUTH_FIELDS = ("t", "x", "y", "vx", "vy", "ax", "ay", "yaw")

EVENT_FIELDS = {
    "gps": ("x", "y"),
    "imu": ("ax", "ay", "yaw"),
    "can": ("speed",),
}
OPTIONAL_FIELDS = {"imu": ("pitch",)}

ROUTE_TYPES = ("straight", "turn", "roundabout", "start_stop")


class RouteSpecError(ValueError):
    pass


class RouteFileError(ValueError):
    pass


class MalformedRouteError(RouteFileError):
    def __init__(self, path, lineno, reason):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = str(path)
        self.lineno = lineno


class VersionMismatchError(RouteFileError):
    pass


@dataclass(frozen=True)
class RawEvent:
    t: float
    kind: str
    payload: dict

    def __post_init__(self):
        if self.kind not in EVENT_FIELDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not math.isfinite(self.t):
            raise ValueError("event time must be finite")
        need = set(EVENT_FIELDS[self.kind])
        allowed = need | set(OPTIONAL_FIELDS.get(self.kind, ()))
        keys = set(self.payload)
        if not need <= keys or not keys <= allowed:
            raise ValueError(f"{self.kind} event fields {sorted(keys)} != {sorted(need)}")

    def __getitem__(self, key):
        return self.payload[key]

    def to_json(self):
        return {"t": self.t, "kind": self.kind, **self.payload}

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        t = obj.pop("t")
        kind = obj.pop("kind")
        return cls(float(t), kind, {k: float(v) for k, v in obj.items()})


def gps(t, x, y):
    return RawEvent(float(t), "gps", {"x": float(x), "y": float(y)})


def imu(t, ax, ay, yaw, pitch=None):
    payload = {"ax": float(ax), "ay": float(ay), "yaw": float(yaw)}
    if pitch is not None:
        payload["pitch"] = float(pitch)
    return RawEvent(float(t), "imu", payload)


def can(t, speed_kmh):
    return RawEvent(float(t), "can", {"speed": float(speed_kmh)})


@dataclass
class SensorConfig:
    gps_interval_range: tuple = (0.1, 0.6)
    gps_interval_mean: float = 0.2
    gps_noise_sigma: float = 0.1
    gps_dropout_prob: float = 0.0
    imu_rate: float = 25.0
    imu_accel_noise_sigma: float = 0.05
    imu_yaw_noise_sigma: float = 0.002
    can_rate: float = 10.0

    def validate(self):
        lo, hi = self.gps_interval_range
        if not (0.1 <= lo < hi <= 0.6):
            raise RouteSpecError(f"gps interval range {self.gps_interval_range} outside [0.1, 0.6]")
        if not lo < self.gps_interval_mean < hi:
            raise RouteSpecError("gps interval mean must lie inside the interval range")
        if self.gps_noise_sigma < 0 or self.imu_accel_noise_sigma < 0 or self.imu_yaw_noise_sigma < 0:
            raise RouteSpecError("noise sigmas must be >= 0")
        if not 0 <= self.gps_dropout_prob < 1:
            raise RouteSpecError("gps dropout probability must lie in [0, 1)")
        if self.imu_rate <= 0 or self.can_rate <= 0:
            raise RouteSpecError("sensor rates must be > 0")


@dataclass
class RouteSpec:
    segments: list
    seed: int = 0
    sensor: SensorConfig = field(default_factory=SensorConfig)
    route_type: str = ""

    def to_json(self):
        d = asdict(self)
        d["sensor"]["gps_interval_range"] = list(self.sensor.gps_interval_range)
        return d

    @classmethod
    def from_json(cls, obj):
        sensor = dict(obj.get("sensor", {}))
        if "gps_interval_range" in sensor:
            sensor["gps_interval_range"] = tuple(sensor["gps_interval_range"])
        return cls(
            segments=[dict(s) for s in obj["segments"]],
            seed=int(obj.get("seed", 0)),
            sensor=SensorConfig(**sensor),
            route_type=obj.get("route_type", ""),
        )


@dataclass
class Truth:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    yaw: np.ndarray
    joins: tuple = ()

    def index(self, times):
        i = np.rint((np.asarray(times, dtype=float) - self.t[0]) / TRUTH_STEP).astype(int)
        return np.clip(i, 0, len(self.t) - 1)

    def position(self, times):
        """Nearest-sample truth position at ``times`` (shape (..., 2))."""
        i = self.index(times)
        return np.stack([self.x[i], self.y[i]], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, Truth):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in TRUTH_FIELDS)


@dataclass
class Route:
    spec: RouteSpec
    events: list
    truth: Truth

    @property
    def route_type(self):
        return self.spec.route_type


def wrap_angle(a):
    """Map to [-pi, pi]; values already in that range are returned unchanged."""
    a = np.asarray(a, dtype=float)
    return np.where(np.abs(a) <= np.pi, a, (a + np.pi) % (2 * np.pi) - np.pi)


# --- kinematics -----------------------------------------------------------


@dataclass
class _Piece:
    kind: str
    t0: float
    duration: float
    p0: tuple
    heading0: float
    v0: float
    accel: float = 0.0  # along-track, for accelerate
    radius: float = 0.0
    turn_sign: float = 0.0

    def state(self, tau):
        """(x, y, vx, vy, ax, ay, heading) at local times ``tau``."""
        x0, y0 = self.p0
        h0 = self.heading0
        z = np.zeros_like(tau)
        if self.kind in ("turn", "roundabout"):
            sgn, r, v = self.turn_sign, self.radius, self.v0
            h = h0 + sgn * v * tau / r
            cx = x0 - sgn * r * math.sin(h0)
            cy = y0 + sgn * r * math.cos(h0)
            x = cx + sgn * r * np.sin(h)
            y = cy - sgn * r * np.cos(h)
            a = sgn * v * v / r
            return x, y, v * np.cos(h), v * np.sin(h), -a * np.sin(h), a * np.cos(h), h
        c, s = math.cos(h0), math.sin(h0)
        if self.kind == "stop":
            return z + x0, z + y0, z, z, z, z, z + h0
        dist = self.v0 * tau + 0.5 * self.accel * tau * tau
        speed = self.v0 + self.accel * tau
        return (x0 + dist * c, y0 + dist * s, speed * c, speed * s,
                z + self.accel * c, z + self.accel * s, z + h0)


def _build_pieces(segments):
    if not segments:
        raise RouteSpecError("route needs at least one segment")
    pieces = []
    t, pos, heading = 0.0, (0.0, 0.0), 0.0
    speed = None
    for n, seg in enumerate(segments):
        kind = seg.get("type")

        def need(key, positive=False, nonneg=False):
            if key not in seg:
                raise RouteSpecError(f"segment {n} ({kind}) missing {key!r}")
            val = float(seg[key])
            if not math.isfinite(val) or (positive and val <= 0) or (nonneg and val < 0):
                raise RouteSpecError(f"segment {n} ({kind}): bad {key}={seg[key]!r}")
            return val

        def entry_speed(v):
            if speed is not None and abs(speed - v) > 1e-9:
                raise RouteSpecError(
                    f"segment {n} ({kind}) starts at {v} m/s but previous segment ends at {speed} m/s")

        if kind == "straight":
            length, v = need("length", positive=True), need("speed", positive=True)
            entry_speed(v)
            p = _Piece("straight", t, length / v, pos, heading, v)
        elif kind in ("turn", "roundabout"):
            r, v = need("radius", positive=True), need("speed", positive=True)
            if kind == "turn":
                angle = need("angle")
            else:
                angle = 2 * math.pi * need("revolutions")
            if angle == 0:
                raise RouteSpecError(f"segment {n} ({kind}) has zero sweep")
            entry_speed(v)
            p = _Piece(kind, t, r * abs(angle) / v, pos, heading, v,
                       radius=r, turn_sign=math.copysign(1.0, angle))
        elif kind == "stop":
            dur = need("duration", positive=True)
            entry_speed(0.0)
            v = 0.0
            p = _Piece("stop", t, dur, pos, heading, 0.0)
        elif kind == "accelerate":
            v_from, v = need("from", nonneg=True), need("to", nonneg=True)
            dur = need("duration", positive=True)
            entry_speed(v_from)
            p = _Piece("accelerate", t, dur, pos, heading, v_from, accel=(v - v_from) / dur)
        else:
            raise RouteSpecError(f"segment {n}: unknown type {kind!r}")
        x, y, _, _, _, _, h = p.state(np.array([p.duration]))
        pos, heading = (float(x[0]), float(y[0])), float(h[0])
        speed = v
        t += p.duration
        pieces.append(p)
    return pieces


def _kinematics(pieces, times):
    times = np.asarray(times, dtype=float)
    starts = np.array([p.t0 for p in pieces])
    idx = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(pieces) - 1)
    out = np.empty((7, len(times)))
    for k, p in enumerate(pieces):
        m = idx == k
        if m.any():
            tau = np.minimum(times[m] - p.t0, p.duration)
            out[:, m] = np.vstack(p.state(tau))
    return out


def generate(spec: RouteSpec) -> Route:
    spec.sensor.validate()
    pieces = _build_pieces(spec.segments)
    total = pieces[-1].t0 + pieces[-1].duration
    sc = spec.sensor

    n_truth = int(math.floor(total / TRUTH_STEP + 1e-9)) + 1
    tt = np.arange(n_truth) * TRUTH_STEP
    k = _kinematics(pieces, tt)
    truth = Truth(tt, k[0], k[1], k[2], k[3], k[4], k[5], wrap_angle(k[6]),
                  joins=tuple(p.t0 for p in pieces[1:]))

    rng_times, rng_gps, rng_drop, rng_imu, rng_start = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(5))

    # GPS: intervals 0.1 + 0.5 * Beta(1, b) scaled to the configured range and mean
    lo, hi = sc.gps_interval_range
    frac = (sc.gps_interval_mean - lo) / (hi - lo)
    b = (1.0 - frac) / frac
    n_max = int(total / lo) + 2
    intervals = lo + (hi - lo) * rng_times.beta(1.0, b, size=n_max)
    g_t = rng_start.uniform(0.0, lo) + np.concatenate([[0.0], np.cumsum(intervals)])
    g_t = g_t[g_t <= total]
    gk = _kinematics(pieces, g_t)
    noise = rng_gps.normal(0.0, 1.0, size=(len(g_t), 2)) * sc.gps_noise_sigma
    keep = rng_drop.uniform(size=len(g_t)) >= sc.gps_dropout_prob
    gx, gy = gk[0] + noise[:, 0], gk[1] + noise[:, 1]

    i_t = np.arange(int(math.floor(total * sc.imu_rate + 1e-9)) + 1) / sc.imu_rate
    ik = _kinematics(pieces, i_t)
    h = ik[6]
    c, s = np.cos(h), np.sin(h)
    # global -> vehicle frame is the transpose of the vehicle -> global rotation
    ax_v = c * ik[4] + s * ik[5]
    ay_v = -s * ik[4] + c * ik[5]
    inoise = rng_imu.normal(0.0, 1.0, size=(len(i_t), 3))
    ax_v = ax_v + inoise[:, 0] * sc.imu_accel_noise_sigma
    ay_v = ay_v + inoise[:, 1] * sc.imu_accel_noise_sigma
    yaw = wrap_angle(h + inoise[:, 2] * sc.imu_yaw_noise_sigma)

    c_t = np.arange(int(math.floor(total * sc.can_rate + 1e-9)) + 1) / sc.can_rate
    ck = _kinematics(pieces, c_t)
    speed_kmh = np.hypot(ck[2], ck[3]) * 3.6

    events = [gps(t, x, y) for t, x, y, kp in zip(g_t, gx, gy, keep) if kp]
    events += [imu(t, a, b_, w, 0.0) for t, a, b_, w in zip(i_t, ax_v, ay_v, yaw)]
    events += [can(t, v) for t, v in zip(c_t, speed_kmh)]
    order = {"gps": 0, "imu": 1, "can": 2}
    events.sort(key=lambda e: (e.t, order[e.kind]))
    return Route(spec, events, truth)


def archetype_spec(route_type: str, seed: int, sensor: SensorConfig = None, duration_scale: float = 1.0) -> RouteSpec:
    """Randomized route of one of the four archetypes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, ROUTE_TYPES.index(route_type)]))
    sensor = sensor or SensorConfig()
    d = duration_scale
    if route_type == "straight":
        v = rng.uniform(11.0, 15.0)
        v2 = v + rng.uniform(-3.0, 3.0)
        segs = [
            {"type": "straight", "length": v * 20 * d, "speed": v},
            {"type": "accelerate", "from": v, "to": v2, "duration": 4.0},
            {"type": "straight", "length": v2 * 20 * d, "speed": v2},
        ]
    elif route_type == "turn":
        v = rng.uniform(6.0, 9.0)
        segs = [{"type": "straight", "length": v * 6, "speed": v}]
        for _ in range(max(1, int(round(4 * d)))):
            angle = rng.choice([-1.0, 1.0]) * rng.uniform(0.35, 0.6) * math.pi
            segs.append({"type": "turn", "radius": rng.uniform(15.0, 35.0), "angle": angle, "speed": v})
            segs.append({"type": "straight", "length": v * rng.uniform(3.0, 6.0), "speed": v})
    elif route_type == "roundabout":
        v = rng.uniform(5.0, 7.0)
        segs = [{"type": "straight", "length": v * 6, "speed": v}]
        for _ in range(max(1, int(round(2 * d)))):
            segs += [
                {"type": "turn", "radius": 15.0, "angle": -math.pi / 4, "speed": v},
                {"type": "roundabout", "radius": rng.uniform(12.0, 20.0),
                 "revolutions": rng.uniform(0.5, 0.9), "speed": v},
                {"type": "turn", "radius": 15.0, "angle": -math.pi / 4, "speed": v},
                {"type": "straight", "length": v * rng.uniform(3.0, 5.0), "speed": v},
            ]
    elif route_type == "start_stop":
        v = rng.uniform(6.0, 10.0)
        segs = [{"type": "straight", "length": v * 6, "speed": v}]
        for _ in range(max(1, int(round(2 * d)))):
            segs += [
                {"type": "accelerate", "from": v, "to": 0.0, "duration": rng.uniform(3.0, 5.0)},
                {"type": "stop", "duration": rng.uniform(3.0, 6.0)},
                {"type": "accelerate", "from": 0.0, "to": v, "duration": rng.uniform(4.0, 6.0)},
                {"type": "straight", "length": v * rng.uniform(3.0, 5.0), "speed": v},
            ]
    else:
        raise RouteSpecError(f"unknown route type {route_type!r}")
    return RouteSpec(segs, seed=seed, sensor=sensor, route_type=route_type)


# --- route files ------------------------------------------------------------


def truth_path(path):
    return Path(str(path) + ".truth")


def write_route(route: Route, path):
    path = Path(path)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
              "seed": route.spec.seed, "spec": route.spec.to_json()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for ev in route.events:
            fh.write(json.dumps(ev.to_json()) + "\n")
    tr = route.truth
    cols = [getattr(tr, f).tolist() for f in TRUTH_FIELDS]
    with open(truth_path(path), "w") as fh:
        for row in zip(*cols):
            fh.write(json.dumps(dict(zip(TRUTH_FIELDS, row))) + "\n")


def parse_header(line, path="<stream>", lineno=1):
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRouteError(path, lineno, f"invalid JSON header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise MalformedRouteError(path, lineno, f"not a {FORMAT_NAME} header")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: route format version {header.get('version')!r}, expected {FORMAT_VERSION}")
    return header


def parse_event(line, path="<stream>", lineno=0):
    try:
        return RawEvent.from_json(json.loads(line))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise MalformedRouteError(path, lineno, f"bad event ({exc})") from None


def read_route(path) -> Route:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedRouteError(path, 1, "empty file")
    header = parse_header(lines[0], path)
    try:
        spec = RouteSpec.from_json(header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRouteError(path, 1, f"bad route spec ({exc})") from None
    events = [parse_event(line, path, n) for n, line in enumerate(lines[1:], start=2)]

    tpath = truth_path(path)
    cols = {f: [] for f in TRUTH_FIELDS}
    with open(tpath) as fh:
        for n, line in enumerate(fh, start=1):
            try:
                row = json.loads(line)
                for f in TRUTH_FIELDS:
                    cols[f].append(float(row[f]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRouteError(tpath, n, f"bad truth row ({exc})") from None
    arrays = {f: np.array(v, dtype=float) for f, v in cols.items()}
    joins = tuple(p.t0 for p in _build_pieces(spec.segments)[1:])
    return Route(spec, events, Truth(**arrays, joins=joins))
