"""Estimator comparison metrics: per-timestep error curves, NMSE, timing.

``error_curve`` gives the squared estimation error at each time step,
averaged over test sequences and state dimensions; ``nmse`` averages the
same quantity over time as well, so nmse == mean(error_curve) by
construction. Inference timing covers the estimate roll-out only, executed
single-threaded, and excludes data loading and metric computation.
"""

from dataclasses import dataclass
import os
import time

import numpy as np

from .dynamics import DEFAULT_TRAJECTORY_RETRIES, generate_trajectory
from .errors import InvalidModelError
from .filters import filter_measurements
from .networks import forward_sequence, initial_state

# Out-of-training-region initial-mean boxes used for the generalization test.
OOR_REGIONS = {
    "springs": (1.0, 1.5),
    "pendulum": (2.0, 2.5),
    "vdp": (1.0, 1.5),
}


def _stack(truth, estimates):
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truth.ndim == 2:
        truth = truth[None]
        estimates = estimates[None]
    if truth.shape != estimates.shape or truth.ndim != 3:
        raise InvalidModelError(
            f"truth {truth.shape} and estimates {estimates.shape} must be "
            "matching (sequences, T, n) stacks")
    return truth, estimates


def error_curve(truth, estimates):
    """Squared error at each t, averaged over sequences and state dims."""
    truth, estimates = _stack(truth, estimates)
    return np.mean((truth - estimates) ** 2, axis=(0, 2))


def nmse(truth, estimates):
    """Squared error averaged over sequences, time steps and state dims."""
    truth, estimates = _stack(truth, estimates)
    return float(np.mean((truth - estimates) ** 2))


class FilterEstimator:
    """Adapter running the KF/EKF baseline over measurement sequences."""

    def __init__(self, model, kind):
        self.model = model
        self.name = kind

    def estimate(self, measurements):
        return filter_measurements(self.model, measurements, self.name)


class NetworkEstimator:
    """Adapter running a trained (or freshly initialized) network."""

    def __init__(self, params, model, train_seconds=0.0):
        self.params = params
        self.model = model
        self.name = params.cfg.arch
        self.train_seconds = train_seconds
        if (params.cfg.m, params.cfg.n) != (model.m, model.n):
            raise InvalidModelError(
                f"checkpoint dims ({params.cfg.m}, {params.cfg.n}) do not "
                f"match system ({model.m}, {model.n})")
        self._x0 = model.init_centroid()

    def warmup(self):
        # first call pays JIT compilation; keep that out of the timed run
        self.estimate(np.zeros((2, self.model.m)))

    def estimate(self, measurements):
        estimates, _ = forward_sequence(
            self.params, measurements, initial_state(self.params.cfg, self._x0))
        return estimates


@dataclass
class EstimatorResult:
    error_curve: np.ndarray
    nmse: float
    test_seconds: float


@dataclass
class EvalReport:
    system: str
    T: int
    m_test: int
    results: dict  # estimator name -> EstimatorResult


def evaluate(model, test_set, estimators):
    """Run every estimator over the test sequences, timing the roll-outs."""
    if not test_set:
        raise InvalidModelError("empty test set")
    truth = np.stack([traj.states[1:] for traj in test_set])
    measurement_sets = [traj.measurements for traj in test_set]
    results = {}
    for est in estimators:
        if hasattr(est, "warmup"):
            est.warmup()
        t0 = time.perf_counter()
        estimates = [est.estimate(ys) for ys in measurement_sets]
        seconds = time.perf_counter() - t0
        stacked = np.stack(estimates)
        results[est.name] = EstimatorResult(
            error_curve=error_curve(truth, stacked),
            nmse=nmse(truth, stacked),
            test_seconds=seconds)
    return EvalReport(system=model.name, T=truth.shape[1],
                      m_test=len(test_set), results=results)


def oor_region(model, bounds=None):
    low, high = bounds if bounds is not None else OOR_REGIONS[model.name]
    return np.tile(np.array([low, high], dtype=float), (model.n, 1))


def out_of_region_testset(model, region, count, seed, T=None):
    """Fresh trajectories whose initial means come from an out-of-training
    box; estimators are evaluated on these without any re-tuning."""
    region = np.asarray(region, dtype=float)
    overlap_low = np.maximum(region[:, 0], model.init_region[:, 0])
    overlap_high = np.minimum(region[:, 1], model.init_region[:, 1])
    if np.all(overlap_low < overlap_high):
        raise InvalidModelError(
            "out-of-region box overlaps the training init region")
    if T is None:
        T = model.default_length
    return [generate_trajectory(model, T, init_mean_region=region,
                                rng_seed=seed + i,
                                retries=DEFAULT_TRAJECTORY_RETRIES)
            for i in range(count)]


def write_summary_csv(path, rows):
    """rows: iterables of (system, estimator, nmse, nmse_oor, train_seconds,
    test_seconds); nmse_oor may be None when no OOR run happened."""
    with open(path, "w") as fh:
        fh.write("system,estimator,nmse,nmse_oor,train_seconds,test_seconds\n")
        for system, name, value, value_oor, train_s, test_s in rows:
            oor = "" if value_oor is None else repr(float(value_oor))
            fh.write(f"{system},{name},{float(value)!r},{oor},"
                     f"{float(train_s)!r},{float(test_s)!r}\n")


def write_error_curve_csv(path, curves):
    """curves: ordered mapping estimator name -> (T,) error curve."""
    names = list(curves)
    lengths = {len(curves[k]) for k in names}
    if len(lengths) != 1:
        raise InvalidModelError("error curves have mismatched lengths")
    T = lengths.pop()
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"error_{k}" for k in names) + "\n")
        for t in range(T):
            fh.write(f"{t + 1}," + ",".join(repr(float(curves[k][t])) for k in names) + "\n")
