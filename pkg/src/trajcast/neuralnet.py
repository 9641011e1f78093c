"""MLP encoder -> LSTM -> MLP decoder, written directly in numpy.

Shapes follow ``(batch, steps, features)``. Everything runs in float64.
Training uses the two-part loss (all outputs, plus the future step's
position deltas weighted by ``loss_weight``), Adam updates and a
reduce-on-plateau learning-rate schedule.
"""

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pipeline import AX, AY, DX, DY, N_FEATURES, WINDOW, YAW, balance
from .simgen import wrap_angle

CHECKPOINT_FORMAT = "trajcast-checkpoint"
CHECKPOINT_VERSION = 1


class NetworkError(RuntimeError):
    pass


class ShapeError(NetworkError, ValueError):
    pass


class DivergenceError(NetworkError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_features: int = N_FEATURES
    seq_len: int = WINDOW
    encoder: tuple = (32, 64)
    hidden: int = 64
    decoder: tuple = (32,)
    layers: int = 1
    leaky_slope: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(int(w) for w in self.encoder))
        object.__setattr__(self, "decoder", tuple(int(w) for w in self.decoder))
        if self.leaky_slope != 0.1:
            raise ValueError("leaky slope is fixed at 0.1")
        if self.layers not in (1, 2):
            raise ValueError("layers must be 1 or 2")
        if min((self.hidden, self.in_features) + self.encoder + self.decoder) < 1:
            raise ValueError("all widths must be >= 1")

    @property
    def out_features(self):
        return self.in_features


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 200
    val_split: float = 0.2
    loss_weight: float = 10.0
    lr_factor: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1e-5
    plateau_threshold: float = 1e-4
    balance: bool = True
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.loss_weight != 10.0:
            raise ValueError("loss weight is fixed at 10")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad batch size or epoch count")
        if not 0 <= self.val_split < 1:
            raise ValueError("val_split must lie in [0, 1)")


def leaky_relu(x, slope=0.1):
    return np.where(x >= 0, x, slope * x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict
    mean: np.ndarray = None
    std: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.config.in_features)
        if self.std is None:
            self.std = np.ones(self.config.in_features)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                           self.mean.copy(), self.std.copy(), dict(self.meta))

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f8").tobytes())
        h.update(self.mean.astype("<f8").tobytes())
        h.update(self.std.astype("<f8").tobytes())
        return h.hexdigest()


def param_shapes(cfg: ModelConfig):
    shapes = {}
    widths = (cfg.in_features,) + cfg.encoder
    for n in range(len(cfg.encoder)):
        shapes[f"enc{n}_w"] = (widths[n], widths[n + 1])
        shapes[f"enc{n}_b"] = (widths[n + 1],)
    inp = widths[-1]
    for n in range(cfg.layers):
        shapes[f"lstm{n}_wx"] = (inp, 4 * cfg.hidden)
        shapes[f"lstm{n}_wh"] = (cfg.hidden, 4 * cfg.hidden)
        shapes[f"lstm{n}_b"] = (4 * cfg.hidden,)
        inp = cfg.hidden
    widths = (cfg.hidden,) + cfg.decoder + (cfg.out_features,)
    for n in range(len(widths) - 1):
        shapes[f"dec{n}_w"] = (widths[n], widths[n + 1])
        shapes[f"dec{n}_b"] = (widths[n + 1],)
    return shapes


def init_params(cfg: ModelConfig, seed=0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every array."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("lstm"):
            fan_in = cfg.hidden
        else:
            fan_in = param_shapes(cfg)[name[:-1] + "w"][0]
        bound = 1.0 / math.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, arrays)


def zero_params(cfg: ModelConfig) -> ModelParams:
    return ModelParams(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})


# --- forward / backward -----------------------------------------------------


def _forward(params: ModelParams, x):
    cfg = params.config
    p = params.arrays
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.in_features):
        raise ShapeError(f"expected (batch, {cfg.seq_len}, {cfg.in_features}) input, got {x.shape}")
    nb, steps, _ = x.shape
    cache = {"x": x}

    h = x.reshape(nb * steps, -1)
    enc = []
    for n in range(len(cfg.encoder)):
        z = h @ p[f"enc{n}_w"] + p[f"enc{n}_b"]
        enc.append((h, z))
        h = leaky_relu(z)
    cache["enc"] = enc
    seq = h.reshape(nb, steps, -1)

    lstm = []
    H = cfg.hidden
    for n in range(cfg.layers):
        xin = seq
        pre_x = (xin.reshape(nb * steps, -1) @ p[f"lstm{n}_wx"] + p[f"lstm{n}_b"]).reshape(nb, steps, 4 * H)
        wh = p[f"lstm{n}_wh"]
        hs = np.zeros((nb, steps + 1, H))
        cs = np.zeros((nb, steps + 1, H))
        gates = np.empty((nb, steps, 4 * H))
        for t in range(steps):
            a = pre_x[:, t] + hs[:, t] @ wh
            i = _sigmoid(a[:, :H])
            f = _sigmoid(a[:, H:2 * H])
            g = np.tanh(a[:, 2 * H:3 * H])
            o = _sigmoid(a[:, 3 * H:])
            c = f * cs[:, t] + i * g
            cs[:, t + 1] = c
            hs[:, t + 1] = o * np.tanh(c)
            gates[:, t, :H] = i
            gates[:, t, H:2 * H] = f
            gates[:, t, 2 * H:3 * H] = g
            gates[:, t, 3 * H:] = o
        lstm.append((xin, hs, cs, gates))
        seq = hs[:, 1:]
    cache["lstm"] = lstm

    h = seq.reshape(nb * steps, H)
    dec = []
    n_dec = len(cfg.decoder) + 1
    for n in range(n_dec):
        z = h @ p[f"dec{n}_w"] + p[f"dec{n}_b"]
        dec.append((h, z))
        h = leaky_relu(z) if n < n_dec - 1 else z
    cache["dec"] = dec
    out = h.reshape(nb, steps, cfg.out_features)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite network output")
    return out, cache


def forward(params: ModelParams, inputs, mode="training"):
    """Predictions in standardized units.

    ``training`` returns all steps ``(nb, 8, 6)``; ``runtime`` returns the
    last step ``(nb, 6)``, sliced from the same computation.
    """
    if mode not in ("training", "runtime"):
        raise ValueError(f"unknown mode {mode!r}")
    out, _ = _forward(params, inputs)
    return out if mode == "training" else out[:, -1]


def loss(predictions, targets, weight=10.0):
    """(total, loss1, loss2): MSE over everything plus weighted MSE of the final (dx, dy)."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ShapeError(f"prediction shape {predictions.shape} != target shape {targets.shape}")
    d = predictions - targets
    loss1 = float(np.mean(d * d))
    d2 = d[:, -1, DX:DY + 1]
    loss2 = float(np.mean(d2 * d2))
    return loss1 + weight * loss2, loss1, loss2


def _loss_grad(pred, targets, weight):
    d = pred - targets
    g = (2.0 / d.size) * d
    nb = d.shape[0]
    g[:, -1, DX:DY + 1] += weight * (2.0 / (nb * 2)) * d[:, -1, DX:DY + 1]
    return g


def backward(params: ModelParams, inputs, targets, weight=10.0):
    """Loss components and exact gradients of the combined loss for every array."""
    cfg = params.config
    p = params.arrays
    pred, cache = _forward(params, inputs)
    total, l1, l2 = loss(pred, targets, weight)
    nb, steps, _ = pred.shape
    H = cfg.hidden
    grads = {}

    dh = _loss_grad(pred, np.asarray(targets, dtype=float), weight).reshape(nb * steps, -1)
    n_dec = len(cfg.decoder) + 1
    for n in reversed(range(n_dec)):
        h, z = cache["dec"][n]
        if n < n_dec - 1:
            dh = dh * np.where(z >= 0, 1.0, cfg.leaky_slope)
        grads[f"dec{n}_w"] = h.T @ dh
        grads[f"dec{n}_b"] = dh.sum(axis=0)
        dh = dh @ p[f"dec{n}_w"].T
    dseq = dh.reshape(nb, steps, H)

    for n in reversed(range(cfg.layers)):
        xin, hs, cs, gates = cache["lstm"][n]
        wh = p[f"lstm{n}_wh"]
        da = np.empty((nb, steps, 4 * H))
        dh_next = np.zeros((nb, H))
        dc_next = np.zeros((nb, H))
        for t in reversed(range(steps)):
            i = gates[:, t, :H]
            f = gates[:, t, H:2 * H]
            g = gates[:, t, 2 * H:3 * H]
            o = gates[:, t, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dht = dseq[:, t] + dh_next
            dc = dht * o * (1.0 - tc * tc) + dc_next
            da[:, t, :H] = dc * g * i * (1.0 - i)
            da[:, t, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            da[:, t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            da[:, t, 3 * H:] = dht * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = da[:, t] @ wh.T
        flat = da.reshape(nb * steps, 4 * H)
        grads[f"lstm{n}_wx"] = xin.reshape(nb * steps, -1).T @ flat
        grads[f"lstm{n}_wh"] = hs[:, :-1].reshape(nb * steps, H).T @ flat
        grads[f"lstm{n}_b"] = flat.sum(axis=0)
        dseq = (flat @ p[f"lstm{n}_wx"].T).reshape(nb, steps, -1)

    dh = dseq.reshape(nb * steps, -1)
    for n in reversed(range(len(cfg.encoder))):
        h, z = cache["enc"][n]
        dh = dh * np.where(z >= 0, 1.0, cfg.leaky_slope)
        grads[f"enc{n}_w"] = h.T @ dh
        grads[f"enc{n}_b"] = dh.sum(axis=0)
        dh = dh @ p[f"enc{n}_w"].T

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    return (total, l1, l2), grads


# --- data ---------------------------------------------------------------------


def make_batch(sequences):
    """Inputs (nb, 8, 6) and targets shifted by one step with the future frame appended."""
    x = np.stack([s.frames for s in sequences])
    y = np.concatenate([x[:, 1:], np.stack([s.target for s in sequences])[:, None]], axis=1)
    return x, y


def standardize(params: ModelParams, raw):
    return (np.asarray(raw, dtype=float) - params.mean) / params.std


def destandardize(params: ModelParams, z):
    return np.asarray(z, dtype=float) * params.std + params.mean


def feature_stats(x, y):
    both = np.concatenate([x.reshape(-1, x.shape[-1]), y[:, -1]])
    mean = both.mean(axis=0)
    std = both.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


def predict_future(params: ModelParams, frames):
    """Raw next frame for one (8, 6) window, or (nb, 6) for a batch of windows."""
    frames = np.asarray(frames, dtype=float)
    single = frames.ndim == 2
    z = forward(params, standardize(params, frames[None] if single else frames), mode="runtime")
    out = destandardize(params, z)
    return out[0] if single else out


# --- training -----------------------------------------------------------------


def rotate_features(frames, angle, mirror=False):
    """Rotate the plane frame of raw features by ``angle``; optionally mirror y first.

    Works on any array whose last axis holds the six features. ``angle`` and
    ``mirror`` broadcast against the leading axis.
    """
    out = np.array(frames, dtype=float)
    angle = np.asarray(angle, dtype=float).reshape((-1,) + (1,) * (out.ndim - 2))
    sign = np.where(np.asarray(mirror), -1.0, 1.0).reshape((-1,) + (1,) * (out.ndim - 2))
    c, s = np.cos(angle), np.sin(angle)
    for i, j in ((DX, DY), (AX, AY)):
        u, v = out[..., i].copy(), sign * out[..., j]
        out[..., i] = c * u - s * v
        out[..., j] = s * u + c * v
    out[..., YAW] = wrap_angle(sign * out[..., YAW] + angle)
    return out


class Adam:
    def __init__(self, params: ModelParams, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, params: ModelParams, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ReduceLROnPlateau:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=10, min_lr=1e-5, threshold=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr


def split_by_route(sequences, val_split, rng):
    routes = sorted({s.route for s in sequences})
    n_val = int(round(val_split * len(routes)))
    if val_split > 0 and len(routes) > 1:
        n_val = min(max(n_val, 1), len(routes) - 1)
    else:
        n_val = 0
    val_routes = set(rng.permutation(routes)[:n_val].tolist()) if n_val else set()
    train = [s for s in sequences if s.route not in val_routes]
    val = [s for s in sequences if s.route in val_routes]
    return train, val, sorted(val_routes)


def evaluate_loss(params: ModelParams, x, y, weight=10.0, chunk=4096):
    """Loss over standardized arrays, in chunks; returns the size-weighted total."""
    tot = 0.0
    for s in range(0, len(x), chunk):
        pred = forward(params, x[s:s + chunk])
        tot += loss(pred, y[s:s + chunk], weight)[0] * len(x[s:s + chunk])
    return tot / len(x)


def train(sequences, train_cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
          seed=0, log=None):
    """Fit a fresh model; returns (params, history).

    History rows are dicts with ``epoch``, ``train_loss``, ``val_loss`` and
    ``lr`` (the rate used during that epoch).
    """
    rng = np.random.default_rng(seed)
    params = init_params(model_cfg, seed)
    seqs = [s for s in sequences if not s.stationary]
    if not seqs:
        raise NetworkError("no non-stationary sequences to train on")
    train_set, val_set, val_routes = split_by_route(seqs, train_cfg.val_split, rng)
    if train_cfg.balance:
        train_set = balance(train_set)
    x, y = make_batch(train_set)
    if train_cfg.augment:
        angle = rng.uniform(-np.pi, np.pi, size=len(x))
        mirror = rng.uniform(size=len(x)) < 0.5
        params.mean, params.std = feature_stats(rotate_features(x, angle, mirror),
                                                rotate_features(y, angle, mirror))
    else:
        params.mean, params.std = feature_stats(x, y)
    params.meta = {"step": float(train_set[0].step), "val_routes": val_routes,
                   "n_train": len(train_set), "n_val": len(val_set), "seed": int(seed)}
    if not train_cfg.augment:
        xs, ys = standardize(params, x), standardize(params, y)
    if val_set:
        xv, yv = make_batch(val_set)
        xv, yv = standardize(params, xv), standardize(params, yv)

    opt = Adam(params, train_cfg.lr, train_cfg.betas, train_cfg.eps)
    sched = ReduceLROnPlateau(train_cfg.lr, train_cfg.lr_factor, train_cfg.lr_patience,
                              train_cfg.min_lr, train_cfg.plateau_threshold)
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        opt.lr = sched.lr
        if train_cfg.augment:
            angle = rng.uniform(-np.pi, np.pi, size=len(x))
            mirror = rng.uniform(size=len(x)) < 0.5
            xs = standardize(params, rotate_features(x, angle, mirror))
            ys = standardize(params, rotate_features(y, angle, mirror))
        order = rng.permutation(len(xs))
        tot = 0.0
        for s in range(0, len(order), train_cfg.batch_size):
            idx = order[s:s + train_cfg.batch_size]
            (lt, _, _), grads = backward(params, xs[idx], ys[idx], train_cfg.loss_weight)
            if not math.isfinite(lt):
                raise DivergenceError(f"training loss became {lt} in epoch {epoch}")
            opt.step(params, grads)
            tot += lt * len(idx)
        train_loss = tot / len(order)
        val_loss = evaluate_loss(params, xv, yv, train_cfg.loss_weight) if val_set else math.nan
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr})
        sched.step(val_loss if val_set else train_loss)
        if log:
            log(history[-1])
    return params, history


# --- checkpoints ----------------------------------------------------------------


def _encode(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj):
    if obj.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported dtype {obj.get('dtype')!r}")
    a = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8")
    return a.reshape(obj["shape"]).astype(float)


def save_checkpoint(params: ModelParams, path):
    cfg = asdict(params.config)
    cfg["encoder"] = list(cfg["encoder"])
    cfg["decoder"] = list(cfg["decoder"])
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "meta": params.meta,
        "mean": _encode(params.mean),
        "std": _encode(params.std),
        "params": {k: _encode(v) for k, v in sorted(params.arrays.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        cfg = ModelConfig(**doc["config"])
        arrays = {k: _decode(v) for k, v in doc["params"].items()}
        params = ModelParams(cfg, arrays, _decode(doc["mean"]), _decode(doc["std"]), doc.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    expected = param_shapes(cfg)
    if set(expected) != set(arrays) or any(arrays[k].shape != s for k, s in expected.items()):
        raise CheckpointError(f"{path}: parameter shapes do not match the stored config")
    return params
