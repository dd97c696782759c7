"""Benchmark dynamical systems, discretization, and trajectory datasets.

Three noisy discrete-time systems are provided: a chain of ten damped
connected springs (linear, zero-order-hold discretized), a down pendulum,
and a reversed Van der Pol oscillator (both nonlinear, fixed-step RK4
discretized). Trajectories evolve as

    x[t+1] = step(x[t]) + w[t+1],    w ~ N(0, Q)
    y[t+1] = C x[t+1]   + v[t+1],    v ~ N(0, R)
    x[0]   = u + e,   u ~ Uniform(init_region),  e ~ N(0, P0)

Randomness is PCG64 (``numpy.random.default_rng``). Each trajectory owns one
seed; ``SeedSequence(seed).spawn(3)`` yields independent child streams for,
in order, the initial condition, the process noise, and the measurement
noise. Datasets assign trajectory i the seed ``base_seed + i``, so any slice
of a dataset can be regenerated independently.
"""

from dataclasses import dataclass, field
import json
import os

import numpy as np

from .errors import DatasetFormatError, IntegrationDivergedError, InvalidModelError

LINEAR_ZOH = "linear_zoh"
NONLINEAR_RK = "nonlinear_rk"

GRAVITY = 9.8        # m/s^2
PENDULUM_LENGTH = 1.0    # m
PENDULUM_MASS = 2.0      # kg
PENDULUM_DAMPING = 0.9   # kg/s

SPRING_MASS = 10.0
SPRING_DAMPING = 6.0
SPRING_STIFFNESS = 800.0
N_SPRINGS = 10

NOISE_SCALE = 0.01   # Q, R, P0 are all this multiple of the identity

SYSTEM_NAMES = ("springs", "pendulum", "vdp")


def _check_psd(M, label):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidModelError(f"{label} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise InvalidModelError(f"{label} must be symmetric")
    w = np.linalg.eigvalsh((M + M.T) / 2.0)
    if w.min() < -1e-10:
        raise InvalidModelError(f"{label} must be positive semi-definite")
    return M


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Immutable description of one benchmark system.

    For ``kind == LINEAR_ZOH`` the discrete transition matrix ``A_d`` is
    set and ``drift`` is None; for ``kind == NONLINEAR_RK`` the
    continuous-time vector field ``drift`` is set and the discrete step is
    one RK4 stage of size ``dt``. ``C`` is the (m, n) measurement matrix
    (all paper systems measure linearly). ``init_region`` is an (n, 2)
    array of [low, high] bounds for sampling initial means.
    """

    name: str
    n: int
    m: int
    dt: float
    kind: str
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P0: np.ndarray
    init_region: np.ndarray
    default_length: int
    A_d: np.ndarray | None = None
    drift: object = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise InvalidModelError("state and measurement dimensions must be >= 1")
        if not self.dt > 0:
            raise InvalidModelError("dt must be positive")
        if self.kind not in (LINEAR_ZOH, NONLINEAR_RK):
            raise InvalidModelError(f"unknown model kind {self.kind!r}")
        _check_psd(self.Q, "Q")
        _check_psd(self.R, "R")
        _check_psd(self.P0, "P0")
        if self.C.shape != (self.m, self.n):
            raise InvalidModelError(f"C must be ({self.m}, {self.n}), got {self.C.shape}")
        if self.kind == LINEAR_ZOH:
            if self.A_d is None or self.A_d.shape != (self.n, self.n):
                raise InvalidModelError("linear models need an (n, n) A_d")
        elif self.drift is None:
            raise InvalidModelError("nonlinear models need a drift function")
        for arr in (self.C, self.Q, self.R, self.P0, self.init_region, self.A_d):
            if arr is not None:
                arr.setflags(write=False)

    def step(self, x):
        """One deterministic (noise-free) discrete time step."""
        if self.kind == LINEAR_ZOH:
            return self.A_d @ x
        return rk4_step(self.drift, x, self.dt)

    def measure(self, x):
        return self.C @ x

    def init_centroid(self):
        return self.init_region.mean(axis=1)


@dataclass(eq=False)
class Trajectory:
    """One simulated roll-out: states x[0..T], measurements y[1..T]."""

    states: np.ndarray        # (T+1, n)
    measurements: np.ndarray  # (T, m)
    seed: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.measurements = np.asarray(self.measurements, dtype=float)
        if len(self.states) != len(self.measurements) + 1:
            raise InvalidModelError(
                "states must be one longer than measurements, got "
                f"{len(self.states)} vs {len(self.measurements)}")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.measurements))):
            raise IntegrationDivergedError("trajectory contains non-finite values")

    @property
    def length(self):
        return len(self.measurements)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.seed == other.seed
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.measurements, other.measurements))


@dataclass(eq=False)
class Dataset:
    """Train/validation/test trajectory splits for one system."""

    system: SystemModel
    train: list
    val: list
    test: list
    split_ratio: tuple = (0.8, 0.1, 0.1)
    base_seed: int = 0

    @property
    def count(self):
        return len(self.train) + len(self.val) + len(self.test)

    @property
    def length(self):
        return self.train[0].length if self.train else 0

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.system.name == other.system.name
                and self.base_seed == other.base_seed
                and self.split_ratio == other.split_ratio
                and self.train == other.train
                and self.val == other.val
                and self.test == other.test)


def zoh_discretize(A_cont, dt):
    """Zero-order-hold transition matrix exp(A_cont * dt).

    Computed by scaling-and-squaring of the truncated exponential series:
    A*dt is halved until its 1-norm is below 0.5, the Taylor series is
    summed to machine precision, and the result squared back up.
    """
    A = np.asarray(A_cont, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidModelError(f"A_cont must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidModelError("A_cont has non-finite entries")
    if not dt > 0:
        raise InvalidModelError("dt must be positive")
    B = A * dt
    norm = np.linalg.norm(B, 1)
    squarings = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    B = B / (2.0 ** squarings)
    n = A.shape[0]
    term = np.eye(n)
    out = np.eye(n)
    for k in range(1, 60):
        term = term @ B / k
        out = out + term
        if np.linalg.norm(term, 1) <= 1e-16 * np.linalg.norm(out, 1):
            break
    for _ in range(squarings):
        out = out @ out
    return out


def rk4_step(drift, x, dt):
    """Classical fixed-step 4-stage Runge-Kutta update; local error O(dt^5)."""
    if not dt > 0:
        raise InvalidModelError("dt must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow in a blowing-up drift is reported as a typed error below
        k1 = np.asarray(drift(x), dtype=float)
        k2 = np.asarray(drift(x + 0.5 * dt * k1), dtype=float)
        k3 = np.asarray(drift(x + 0.5 * dt * k2), dtype=float)
        k4 = np.asarray(drift(x + dt * k3), dtype=float)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationDivergedError("RK4 step produced non-finite values")
    return out


def pendulum_drift(x):
    """Down pendulum: angle x1, angular velocity x2."""
    return np.array([
        x[1],
        -(GRAVITY / PENDULUM_LENGTH) * np.sin(x[0])
        - (PENDULUM_DAMPING / PENDULUM_MASS) * x[1],
    ])


def vdp_drift(x):
    """Reversed Van der Pol oscillator."""
    return np.array([-x[1], x[0] + (x[0] ** 2 - 1.0) * x[1]])


def _springs_continuous():
    """Continuous-time matrix of the 10-mass spring chain, states [pos; vel]."""
    k = SPRING_STIFFNESS
    d = SPRING_DAMPING
    ns = N_SPRINGS
    K = np.zeros((ns, ns))
    D = np.zeros((ns, ns))
    for i in range(ns):
        K[i, i] = k + (k if i < ns - 1 else 0.0)
        D[i, i] = d + (d if i < ns - 1 else 0.0)
        if i < ns - 1:
            K[i, i + 1] = K[i + 1, i] = -k
            D[i, i + 1] = D[i + 1, i] = -d
    A = np.zeros((2 * ns, 2 * ns))
    A[:ns, ns:] = np.eye(ns)
    A[ns:, :ns] = -K / SPRING_MASS
    A[ns:, ns:] = -D / SPRING_MASS
    return A


def _iso_cov(dim):
    return NOISE_SCALE * np.eye(dim)


def _box(low, high, dim):
    return np.tile(np.array([low, high], dtype=float), (dim, 1))


def springs_model():
    """Ten connected springs: 20 states (10 positions then 10 velocities),
    positions measured, dt = 0.1 s, ZOH discretization."""
    n = 2 * N_SPRINGS
    dt = 0.1
    A_d = zoh_discretize(_springs_continuous(), dt)
    C = np.hstack([np.eye(N_SPRINGS), np.zeros((N_SPRINGS, N_SPRINGS))])
    return SystemModel(
        name="springs", n=n, m=N_SPRINGS, dt=dt, kind=LINEAR_ZOH,
        C=C, Q=_iso_cov(n), R=_iso_cov(N_SPRINGS), P0=_iso_cov(n),
        init_region=_box(-1.0, 1.0, n), default_length=500, A_d=A_d)


def pendulum_model():
    """Down pendulum: 2 states, position measured, dt = 0.01 s, RK4."""
    return SystemModel(
        name="pendulum", n=2, m=1, dt=0.01, kind=NONLINEAR_RK,
        C=np.array([[1.0, 0.0]]), Q=_iso_cov(2), R=_iso_cov(1), P0=_iso_cov(2),
        init_region=_box(-2.0, 2.0, 2), default_length=4000,
        drift=pendulum_drift)


def vdp_model():
    """Reversed Van der Pol: 2 states, position measured, dt = 0.1 s, RK4."""
    return SystemModel(
        name="vdp", n=2, m=1, dt=0.1, kind=NONLINEAR_RK,
        C=np.array([[1.0, 0.0]]), Q=_iso_cov(2), R=_iso_cov(1), P0=_iso_cov(2),
        init_region=_box(-1.0, 1.0, 2), default_length=300,
        drift=vdp_drift)


_MODEL_FACTORIES = {
    "springs": springs_model,
    "pendulum": pendulum_model,
    "vdp": vdp_model,
}


def get_model(name):
    try:
        return _MODEL_FACTORIES[name]()
    except KeyError:
        raise InvalidModelError(
            f"unknown system {name!r}; expected one of {SYSTEM_NAMES}") from None


def psd_factor(M):
    """A factor L with L L^T = M for symmetric PSD M (eigh-based, so exact
    zeros and semi-definite matrices are handled)."""
    M = np.asarray(M, dtype=float)
    if not M.any():
        return np.zeros_like(M)
    w, V = np.linalg.eigh((M + M.T) / 2.0)
    return V * np.sqrt(np.clip(w, 0.0, None))


# The reversed Van der Pol origin is only locally attracting: its basin is
# bounded by the repelling limit cycle, and process noise walks roughly 1% of
# length-300 sequences across it, after which the state blows up. Dataset
# generation therefore resamples diverged realizations deterministically:
# attempt k of sequence seed s uses seed s + k * RETRY_SEED_STRIDE.
RETRY_SEED_STRIDE = 10 ** 9
DEFAULT_TRAJECTORY_RETRIES = 20


def generate_trajectory(model, T, init_mean_region=None, rng_seed=0, retries=0):
    """Simulate one noisy trajectory of length T, deterministic in rng_seed.

    With ``retries`` = 0 (the default) integration divergence propagates.
    With retries allowed, diverged realizations are redrawn from the
    documented retry seeds; the returned Trajectory records the seed that
    actually produced it.
    """
    if T < 1:
        raise InvalidModelError("T must be >= 1")
    last_error = None
    for attempt in range(retries + 1):
        seed = rng_seed + attempt * RETRY_SEED_STRIDE
        try:
            return _generate_trajectory_once(model, T, init_mean_region, seed)
        except IntegrationDivergedError as exc:
            last_error = exc
    raise last_error


def _generate_trajectory_once(model, T, init_mean_region, rng_seed):
    region = model.init_region if init_mean_region is None else np.asarray(init_mean_region, dtype=float)
    if region.shape != (model.n, 2):
        raise InvalidModelError(f"init region must be ({model.n}, 2), got {region.shape}")
    s_init, s_proc, s_meas = np.random.SeedSequence(rng_seed).spawn(3)
    rng_init = np.random.default_rng(s_init)
    rng_proc = np.random.default_rng(s_proc)
    rng_meas = np.random.default_rng(s_meas)

    u = rng_init.uniform(region[:, 0], region[:, 1])
    x0 = u + psd_factor(model.P0) @ rng_init.standard_normal(model.n)
    process = rng_proc.standard_normal((T, model.n)) @ psd_factor(model.Q).T
    measure = rng_meas.standard_normal((T, model.m)) @ psd_factor(model.R).T

    states = np.empty((T + 1, model.n))
    states[0] = x0
    x = x0
    for t in range(T):
        x = model.step(x) + process[t]
        states[t + 1] = x
    if not np.all(np.isfinite(states)):
        raise IntegrationDivergedError(f"{model.name} trajectory diverged")
    measurements = states[1:] @ model.C.T + measure
    return Trajectory(states=states, measurements=measurements, seed=rng_seed)


def generate_dataset(model, T=None, count=100, base_seed=0):
    """Generate ``count`` trajectories split 80:10:10 in generation order."""
    if count < 10:
        raise InvalidModelError("dataset needs at least 10 sequences")
    if T is None:
        T = model.default_length
    trajs = [generate_trajectory(model, T, rng_seed=base_seed + i,
                                 retries=DEFAULT_TRAJECTORY_RETRIES)
             for i in range(count)]
    n_train = int(count * 0.8)
    n_val = int(count * 0.1)
    return Dataset(
        system=model,
        train=trajs[:n_train],
        val=trajs[n_train:n_train + n_val],
        test=trajs[n_train + n_val:],
        base_seed=base_seed,
    )


def _format_row(values):
    return ",".join(repr(float(v)) for v in values)


def save_dataset(ds, path):
    """Persist a dataset as manifest.json plus one CSV per sequence.

    Floats are written as shortest round-trip decimals, so
    ``load_dataset(save_dataset(ds)) == ds`` bit-exactly.
    """
    os.makedirs(path, exist_ok=True)
    model = ds.system
    trajs = ds.train + ds.val + ds.test
    T = trajs[0].length
    manifest = {
        "system": model.name,
        "n": model.n,
        "m": model.m,
        "dt": model.dt,
        "T": T,
        "count": len(trajs),
        "base_seed": ds.base_seed,
        "seeds": [traj.seed for traj in trajs],
        "split_ratio": list(ds.split_ratio),
        "split": {
            "train": list(range(len(ds.train))),
            "val": list(range(len(ds.train), len(ds.train) + len(ds.val))),
            "test": list(range(len(ds.train) + len(ds.val), len(trajs))),
        },
        "covariances": {
            "q": float(model.Q[0, 0]),
            "r": float(model.R[0, 0]),
            "p0": float(model.P0[0, 0]),
        },
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    header = ",".join(
        ["t"]
        + [f"x_{i + 1}" for i in range(model.n)]
        + [f"y_{i + 1}" for i in range(model.m)])
    for idx, traj in enumerate(trajs):
        lines = [header]
        blank = "," * (model.m - 1)
        lines.append("0," + _format_row(traj.states[0]) + "," + blank)
        for t in range(1, T + 1):
            lines.append(
                f"{t}," + _format_row(traj.states[t]) + ","
                + _format_row(traj.measurements[t - 1]))
        with open(os.path.join(path, f"seq_{idx:04d}.csv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    """Load a dataset directory written by save_dataset, validating shapes."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isdir(path) or not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no dataset at {path!r}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        name = manifest["system"]
        n, m = manifest["n"], manifest["m"]
        T, count = manifest["T"], manifest["count"]
        base_seed = manifest["base_seed"]
        seeds = manifest.get("seeds", [base_seed + i for i in range(count)])
        split = manifest["split"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"malformed manifest in {path!r}: {exc}") from exc
    model = get_model(name)
    if (model.n, model.m) != (n, m) or abs(model.dt - manifest["dt"]) > 1e-15:
        raise DatasetFormatError(
            f"manifest dimensions ({n}, {m}, dt={manifest['dt']}) do not match "
            f"system {name!r} ({model.n}, {model.m}, dt={model.dt})")
    trajs = []
    for idx in range(count):
        seq_path = os.path.join(path, f"seq_{idx:04d}.csv")
        if not os.path.exists(seq_path):
            raise DatasetFormatError(f"missing sequence file {seq_path!r}")
        with open(seq_path) as fh:
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
        if len(rows) != T + 2:
            raise DatasetFormatError(
                f"{seq_path!r}: expected {T + 2} rows, found {len(rows)}")
        width = 1 + n + m
        states = np.empty((T + 1, n))
        measurements = np.empty((T, m))
        for r, row in enumerate(rows[1:]):
            if len(row) != width:
                raise DatasetFormatError(
                    f"{seq_path!r} row {r}: dimension mismatch, expected "
                    f"{width} columns, found {len(row)}")
            try:
                states[r] = [float(v) for v in row[1:1 + n]]
                if r > 0:
                    measurements[r - 1] = [float(v) for v in row[1 + n:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{seq_path!r} row {r}: {exc}") from exc
        trajs.append(Trajectory(states=states, measurements=measurements,
                                seed=seeds[idx]))
    try:
        return Dataset(
            system=model,
            train=[trajs[i] for i in split["train"]],
            val=[trajs[i] for i in split["val"]],
            test=[trajs[i] for i in split["test"]],
            split_ratio=tuple(manifest.get("split_ratio", (0.8, 0.1, 0.1))),
            base_seed=base_seed,
        )
    except (KeyError, IndexError, TypeError) as exc:
        raise DatasetFormatError(f"malformed split table in {path!r}: {exc}") from exc
