"""Recurrent estimator architectures with exact BPTT gradients.

Four cells are provided, each mapping a measurement sequence y[1..T] to
state estimates x̂[1..T]:

* ``ern``   a' = sigmoid(W_ay y + W_aa a + b_a);          x̂ = W_xa a' + b_x
* ``jrn``   a' = sigmoid(W_ay y + W_ax x̂_prev + b_a);     x̂ = W_xa a' + b_x
* ``elstm`` standard LSTM gates driven by (y, a_prev)
* ``jlstm`` same gates driven by (y, x̂_prev) — the hidden vector is not
  carried between steps, only the previous output estimate and the cell.

Sequence loss is the squared estimation error averaged over time steps and
state dimensions. Gradients are exact full-sequence backpropagation through
time, including the output-to-gate paths of the Jordan variants. The heavy
lifting lives in :mod:`rnnfilter.kernels`.
"""

from dataclasses import dataclass, field, asdict
import json

import numpy as np

from . import kernels
from .errors import DatasetFormatError, InvalidModelError

ARCHITECTURES = ("ern", "jrn", "elstm", "jlstm")

_RNN_ARCHS = ("ern", "jrn")
_LSTM_ARCHS = ("elstm", "jlstm")


@dataclass(frozen=True)
class NetworkConfig:
    arch: str
    m: int
    n: int
    hidden: int = 50
    recurrent_activation: str = "sigmoid"
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise InvalidModelError(
                f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.hidden < 1 or self.m < 1 or self.n < 1:
            raise InvalidModelError("hidden, m and n must all be >= 1")
        if self.recurrent_activation != "sigmoid":
            raise InvalidModelError("only sigmoid recurrent activation is supported")

    @property
    def is_jordan(self):
        return self.arch in ("jrn", "jlstm")

    @property
    def is_lstm(self):
        return self.arch in _LSTM_ARCHS


def param_shapes(cfg):
    """Ordered mapping of parameter name -> shape for one architecture."""
    h, m, n = cfg.hidden, cfg.m, cfg.n
    r = n if cfg.is_jordan else h
    rec = "x" if cfg.is_jordan else "a"
    if cfg.is_lstm:
        shapes = {}
        for gate in ("f", "i", "o", "c"):
            shapes[f"W_{gate}y"] = (h, m)
        for gate in ("f", "i", "o", "c"):
            shapes[f"W_{gate}{rec}"] = (h, r)
        shapes["W_xa"] = (n, h)
        for gate in ("f", "i", "o", "c"):
            shapes[f"b_{gate}"] = (h,)
        shapes["b_x"] = (n,)
        return shapes
    return {
        "W_ay": (h, m),
        f"W_a{rec}": (h, r),
        "W_xa": (n, h),
        "b_a": (h,),
        "b_x": (n,),
    }


@dataclass(eq=False)
class NetworkParams:
    """All weight matrices and bias vectors of one network."""

    cfg: NetworkConfig
    arrays: dict

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if list(self.arrays) != list(expected):
            raise InvalidModelError(
                f"parameter names {list(self.arrays)} do not match {list(expected)}")
        for name, shape in expected.items():
            arr = np.ascontiguousarray(self.arrays[name], dtype=float)
            if arr.shape != shape:
                raise InvalidModelError(
                    f"parameter {name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidModelError(f"parameter {name} has non-finite entries")
            self.arrays[name] = arr

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        return NetworkParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def recurrent_names(self):
        rec = "x" if self.cfg.is_jordan else "a"
        if self.cfg.is_lstm:
            return [f"W_{g}{rec}" for g in ("f", "i", "o", "c")]
        return [f"W_a{rec}"]


@dataclass
class NetworkState:
    """Per-timestep carry: hidden a, cell c, previous estimate, gate record."""

    a: np.ndarray
    c: np.ndarray
    x_prev: np.ndarray
    f: np.ndarray | None = None
    i: np.ndarray | None = None
    o: np.ndarray | None = None
    c_tilde: np.ndarray | None = None


def initial_state(cfg, x0=None):
    """Zero hidden and cell carries; x̂_prev defaults to zeros.

    Callers that know the system pass x0 = centroid of the training
    initial-condition box so Jordan variants start from the same prior as
    the filters.
    """
    x_prev = np.zeros(cfg.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    return NetworkState(a=np.zeros(cfg.hidden), c=np.zeros(cfg.hidden), x_prev=x_prev)


def init_params(cfg):
    """Glorot-uniform weights, orthogonal-row output map, zero biases.

    Matrices are drawn in parameter order from a PCG64 stream seeded with
    cfg.seed. W_xa is the first n rows of the orthogonal factor of a QR
    decomposition of a hidden x hidden standard-normal draw, sign-fixed so
    the triangular factor has a positive diagonal.
    """
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        elif name == "W_xa":
            normal = rng.standard_normal((cfg.hidden, cfg.hidden))
            q, r = np.linalg.qr(normal)
            signs = np.sign(np.diag(r))
            signs[signs == 0] = 1.0
            arrays[name] = (q * signs)[:cfg.n, :].copy()
        else:
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, shape)
    return NetworkParams(cfg, arrays)


def count_params(cfg):
    return sum(int(np.prod(shape)) for shape in param_shapes(cfg).values())


def _vec(y, dim, label):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape != (dim,):
        raise InvalidModelError(f"{label} must have dimension {dim}, got {y.shape}")
    return y


def ern_step(params, state, y):
    p = params.arrays
    y = _vec(y, params.cfg.m, "measurement")
    a = kernels.sigmoid(p["W_ay"] @ y + p["W_aa"] @ state.a + p["b_a"])
    xhat = p["W_xa"] @ a + p["b_x"]
    return NetworkState(a=a, c=state.c, x_prev=state.x_prev), xhat


def jrn_step(params, state, y):
    p = params.arrays
    y = _vec(y, params.cfg.m, "measurement")
    a = kernels.sigmoid(p["W_ay"] @ y + p["W_ax"] @ state.x_prev + p["b_a"])
    xhat = p["W_xa"] @ a + p["b_x"]
    return NetworkState(a=a, c=state.c, x_prev=xhat), xhat


def _lstm_step(params, state, y, rec_vec, rec):
    p = params.arrays
    f = kernels.sigmoid(p["W_fy"] @ y + p[f"W_f{rec}"] @ rec_vec + p["b_f"])
    i = kernels.sigmoid(p["W_iy"] @ y + p[f"W_i{rec}"] @ rec_vec + p["b_i"])
    o = kernels.sigmoid(p["W_oy"] @ y + p[f"W_o{rec}"] @ rec_vec + p["b_o"])
    c_tilde = np.tanh(p["W_cy"] @ y + p[f"W_c{rec}"] @ rec_vec + p["b_c"])
    c = f * state.c + i * c_tilde
    a = o * np.tanh(c)
    xhat = p["W_xa"] @ a + p["b_x"]
    return f, i, o, c_tilde, c, a, xhat


def elstm_step(params, state, y):
    y = _vec(y, params.cfg.m, "measurement")
    f, i, o, c_tilde, c, a, xhat = _lstm_step(params, state, y, state.a, "a")
    new = NetworkState(a=a, c=c, x_prev=state.x_prev, f=f, i=i, o=o, c_tilde=c_tilde)
    return new, xhat


def jlstm_step(params, state, y):
    y = _vec(y, params.cfg.m, "measurement")
    f, i, o, c_tilde, c, a, xhat = _lstm_step(params, state, y, state.x_prev, "x")
    new = NetworkState(a=a, c=c, x_prev=xhat, f=f, i=i, o=o, c_tilde=c_tilde)
    return new, xhat


STEP_FUNCTIONS = {
    "ern": ern_step,
    "jrn": jrn_step,
    "elstm": elstm_step,
    "jlstm": jlstm_step,
}


@dataclass
class Tape:
    """Everything the backward pass needs from one forward roll-out."""

    cfg: NetworkConfig
    ys: np.ndarray
    X: np.ndarray
    A: np.ndarray
    RS: np.ndarray
    F: np.ndarray | None = None
    I: np.ndarray | None = None
    O: np.ndarray | None = None
    G: np.ndarray | None = None
    CS: np.ndarray | None = None


def forward_sequence(params, measurements, init_state=None):
    """Roll the cell over a (T, m) measurement array.

    Returns (estimates, tape) where estimates has shape (T, n). The carry
    defaults to :func:`initial_state` with a zero x̂_prev.
    """
    cfg = params.cfg
    ys = np.ascontiguousarray(measurements, dtype=float)
    if ys.ndim != 2 or ys.shape[1] != cfg.m:
        raise InvalidModelError(f"measurements must be (T, {cfg.m}), got {ys.shape}")
    if ys.shape[0] < 1:
        raise InvalidModelError("measurement sequence is empty")
    state = init_state if init_state is not None else initial_state(cfg)
    r0 = np.ascontiguousarray(state.x_prev if cfg.is_jordan else state.a, dtype=float)
    p = params.arrays
    if cfg.is_lstm:
        c0 = np.ascontiguousarray(state.c, dtype=float)
        rec = "x" if cfg.is_jordan else "a"
        X, A, F, I, O, G, CS, RS = kernels.lstm_forward(
            ys, r0, c0,
            p["W_fy"], p["W_iy"], p["W_oy"], p["W_cy"],
            p[f"W_f{rec}"], p[f"W_i{rec}"], p[f"W_o{rec}"], p[f"W_c{rec}"],
            p["W_xa"], p["b_f"], p["b_i"], p["b_o"], p["b_c"], p["b_x"],
            cfg.is_jordan)
        tape = Tape(cfg=cfg, ys=ys, X=X, A=A, RS=RS, F=F, I=I, O=O, G=G, CS=CS)
    else:
        rec = "x" if cfg.is_jordan else "a"
        X, A, RS = kernels.rnn_forward(
            ys, r0, p["W_ay"], p[f"W_a{rec}"], p["W_xa"], p["b_a"], p["b_x"],
            cfg.is_jordan)
        tape = Tape(cfg=cfg, ys=ys, X=X, A=A, RS=RS)
    return X, tape


def sequence_loss(estimates, targets):
    """Squared error averaged over time steps and state dimensions."""
    estimates = np.asarray(estimates, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if estimates.shape != targets.shape:
        raise InvalidModelError(
            f"estimates {estimates.shape} and targets {targets.shape} differ")
    return float(np.mean((estimates - targets) ** 2))


def bptt_gradients(params, tape, targets):
    """Exact loss and gradients for one sequence.

    Gradients cover every parameter; derivatives with respect to the
    constant initial carries are discarded.
    """
    cfg = params.cfg
    targets = np.ascontiguousarray(targets, dtype=float)
    if targets.shape != tape.X.shape:
        raise InvalidModelError(
            f"targets must have shape {tape.X.shape}, got {targets.shape}")
    p = params.arrays
    rec = "x" if cfg.is_jordan else "a"
    if cfg.is_lstm:
        out = kernels.lstm_backward(
            tape.ys, targets, tape.A, tape.F, tape.I, tape.O, tape.G,
            tape.CS, tape.RS, tape.X,
            p[f"W_f{rec}"], p[f"W_i{rec}"], p[f"W_o{rec}"], p[f"W_c{rec}"],
            p["W_xa"], cfg.is_jordan)
        loss = out[0]
        names = list(param_shapes(cfg))
        grads = dict(zip(names, out[1:]))
    else:
        loss, gW_ay, gW_ar, gW_xa, gb_a, gb_x = kernels.rnn_backward(
            tape.ys, targets, tape.A, tape.X, tape.RS,
            p[f"W_a{rec}"], p["W_xa"], cfg.is_jordan)
        grads = {"W_ay": gW_ay, f"W_a{rec}": gW_ar, "W_xa": gW_xa,
                 "b_a": gb_a, "b_x": gb_x}
    return float(loss), grads


CHECKPOINT_FORMAT = "rnnfilter-checkpoint-v1"


def save_checkpoint(params, path, extra=None):
    """Write config plus row-major parameter values as JSON; bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(params.cfg),
        "params": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in params.arrays.items()
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, extra-metadata dict)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed checkpoint {path!r}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DatasetFormatError(f"{path!r} is not a network checkpoint")
    try:
        cfg = NetworkConfig(**doc["config"])
        arrays = {
            name: np.array(entry["data"], dtype=float).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        params = NetworkParams(cfg, arrays)
    except (KeyError, TypeError, ValueError, InvalidModelError) as exc:
        raise DatasetFormatError(f"malformed checkpoint {path!r}: {exc}") from exc
    return params, doc.get("extra", {})
