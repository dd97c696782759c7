"""Model-based baseline estimators: Kalman filter and extended Kalman filter.

Both filters are initialized from the training initial-condition box alone
(mean at its centroid, covariance P0 plus the box variance), which matches
the prior information available to the trained networks and is deliberately
left unchanged for out-of-region evaluation.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dynamics import LINEAR_ZOH, NONLINEAR_RK, rk4_step
from .errors import InvalidModelError, SingularInnovationError

KF = "kf"
EKF = "ekf"


@dataclass
class FilterState:
    """Gaussian belief: mean estimate and error covariance."""

    mean: np.ndarray
    cov: np.ndarray


def _box_init(model, init_mean):
    if init_mean is None:
        mean = model.init_centroid()
    else:
        mean = np.asarray(init_mean, dtype=float)
        if mean.shape != (model.n,):
            raise InvalidModelError(f"init_mean must have shape ({model.n},)")
    widths = model.init_region[:, 1] - model.init_region[:, 0]
    cov = model.P0 + np.diag(widths ** 2 / 12.0)
    return FilterState(mean=mean, cov=cov)


def kf_init(model, init_mean=None):
    """Initial KF state: centroid mean, P0 plus uniform-box variance."""
    if model.kind != LINEAR_ZOH:
        raise InvalidModelError(f"KF requires a linear model, got kind {model.kind!r}")
    return _box_init(model, init_mean)


def ekf_init(model, init_mean=None):
    """Initial EKF state, same construction as kf_init."""
    if model.kind != NONLINEAR_RK:
        raise InvalidModelError(f"EKF requires a nonlinear model, got kind {model.kind!r}")
    return _box_init(model, init_mean)


def _measurement_update(x_pred, P_pred, C, R, y):
    S = C @ P_pred @ C.T + R
    try:
        factor = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError("innovation covariance is not positive definite") from exc
    K = cho_solve(factor, C @ P_pred).T
    mean = x_pred + K @ (y - C @ x_pred)
    P = (np.eye(len(x_pred)) - K @ C) @ P_pred
    return FilterState(mean=mean, cov=(P + P.T) / 2.0)


def kf_step(state, model, y):
    """Standard predict-update Kalman recursion for the linear model."""
    if model.kind != LINEAR_ZOH:
        raise InvalidModelError("kf_step requires a linear model")
    A = model.A_d
    x_pred = A @ state.mean
    P_pred = A @ state.cov @ A.T + model.Q
    return _measurement_update(x_pred, P_pred, model.C, model.R, np.asarray(y, dtype=float))


def step_jacobian(model, x, rel_step=1e-6):
    """Central-difference Jacobian of the full RK4 step map at x."""
    n = model.n
    F = np.empty((n, n))
    for i in range(n):
        h = rel_step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        F[:, i] = (rk4_step(model.drift, xp, model.dt)
                   - rk4_step(model.drift, xm, model.dt)) / (2.0 * h)
    return F


def ekf_step(state, model, y):
    """EKF recursion: RK4 prediction, finite-difference step Jacobian."""
    if model.kind != NONLINEAR_RK:
        raise InvalidModelError("ekf_step requires a nonlinear model")
    x_pred = rk4_step(model.drift, state.mean, model.dt)
    F = step_jacobian(model, state.mean)
    P_pred = F @ state.cov @ F.T + model.Q
    return _measurement_update(x_pred, P_pred, model.C, model.R, np.asarray(y, dtype=float))


def filter_measurements(model, measurements, kind, init_mean=None):
    """Roll the chosen filter over a (T, m) measurement array -> (T, n) means."""
    if kind == KF:
        state = kf_init(model, init_mean)
        step = kf_step
    elif kind == EKF:
        state = ekf_init(model, init_mean)
        step = ekf_step
    else:
        raise InvalidModelError(f"unknown filter kind {kind!r}")
    out = np.empty((len(measurements), model.n))
    for t, y in enumerate(measurements):
        state = step(state, model, y)
        out[t] = state.mean
    return out


def run_filter(model, traj, kind):
    """Estimate a trajectory's states from its measurements only."""
    return filter_measurements(model, traj.measurements, kind)
