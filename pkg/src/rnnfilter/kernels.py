"""Hot inner loops for the recurrent estimators.

The per-timestep recurrences below dominate the runtime of training and
inference, so they are compiled with numba's ``@njit`` when numba is
importable. Setting the environment variable ``RNNFILTER_DISABLE_NUMBA=1``
(before first import) selects the pure-numpy fallback: the same function
bodies run interpreted, so both paths produce identical results.
``benchmarks/bench_kernels.py`` times one path against the other.

All kernels take plain C-contiguous float64 arrays and scalars only. The
Elman and Jordan variants of each architecture share a kernel: ``jordan``
selects whether the carried recurrent vector ``r`` is the hidden state
(Elman) or the previous output estimate (Jordan), which is the only
difference between the two forward propagations.
"""

import math
import os

import numpy as np

_DISABLE = os.environ.get("RNNFILTER_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

if not _DISABLE:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        _DISABLE = True

NUMBA_ENABLED = not _DISABLE

if NUMBA_ENABLED:
    def _jit(fn):
        return _njit(cache=True, nogil=True)(fn)
else:
    def _jit(fn):
        fn.py_func = fn  # mirror the numba attribute so callers never branch
        return fn


@_jit
def sigmoid(z):
    """Numerically stable elementwise logistic; no overflow for |z| <= 700."""
    out = np.empty_like(z)
    for k in range(z.shape[0]):
        v = z[k]
        if v >= 0.0:
            out[k] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            out[k] = e / (1.0 + e)
    return out


@_jit
def rnn_forward(ys, r0, W_ay, W_ar, W_xa, b_a, b_x, jordan):
    """Roll a simple recurrent cell over ys.

    Returns (X, A, RS): per-step outputs (T, n), hidden states (T, h), and
    the carried recurrent vectors (T+1, rdim) with RS[0] = r0. RS[t] is the
    recurrent input consumed at step t, kept for backpropagation.
    """
    T = ys.shape[0]
    h = b_a.shape[0]
    n = b_x.shape[0]
    rdim = r0.shape[0]
    A = np.empty((T, h))
    X = np.empty((T, n))
    RS = np.empty((T + 1, rdim))
    RS[0] = r0
    for t in range(T):
        a = sigmoid(W_ay @ ys[t] + W_ar @ RS[t] + b_a)
        x = W_xa @ a + b_x
        A[t] = a
        X[t] = x
        if jordan:
            RS[t + 1] = x
        else:
            RS[t + 1] = a
    return X, A, RS


@_jit
def rnn_backward(ys, targets, A, X, RS, W_ar, W_xa, jordan):
    """Exact gradients of the time-and-state averaged squared error.

    Loss is sum_t |X[t]-targets[t]|^2 / (T*n). Returns
    (loss, gW_ay, gW_ar, gW_xa, gb_a, gb_x).
    """
    T = ys.shape[0]
    m = ys.shape[1]
    h = A.shape[1]
    n = X.shape[1]
    rdim = RS.shape[1]
    gW_ay = np.zeros((h, m))
    gW_ar = np.zeros((h, rdim))
    gW_xa = np.zeros((n, h))
    gb_a = np.zeros(h)
    gb_x = np.zeros(n)
    W_xaT = W_xa.T.copy()
    W_arT = W_ar.T.copy()
    scale = 2.0 / (T * n)
    sq = 0.0
    dr = np.zeros(rdim)
    for t in range(T - 1, -1, -1):
        res = X[t] - targets[t]
        sq += res @ res
        dx = scale * res
        if jordan:
            dx = dx + dr
        a = A[t]
        gW_xa += dx.reshape((n, 1)) * a.reshape((1, h))
        gb_x += dx
        da = W_xaT @ dx
        if not jordan:
            da = da + dr
        dz = da * a * (1.0 - a)
        gW_ay += dz.reshape((h, 1)) * ys[t].reshape((1, m))
        gW_ar += dz.reshape((h, 1)) * RS[t].reshape((1, rdim))
        gb_a += dz
        dr = W_arT @ dz
    return sq / (T * n), gW_ay, gW_ar, gW_xa, gb_a, gb_x


@_jit
def lstm_forward(ys, r0, c0,
                 W_fy, W_iy, W_oy, W_cy,
                 W_fr, W_ir, W_or, W_cr,
                 W_xa, b_f, b_i, b_o, b_c, b_x, jordan):
    """Roll an LSTM cell over ys.

    Returns (X, A, F, I, O, G, CS, RS): outputs, hidden states, the three
    gate activations, the candidate G, cell states CS (T+1, h) with
    CS[0] = c0, and carried recurrent vectors RS (T+1, rdim) with RS[0] = r0.
    """
    T = ys.shape[0]
    h = b_f.shape[0]
    n = b_x.shape[0]
    rdim = r0.shape[0]
    F = np.empty((T, h))
    I = np.empty((T, h))
    O = np.empty((T, h))
    G = np.empty((T, h))
    CS = np.empty((T + 1, h))
    A = np.empty((T, h))
    X = np.empty((T, n))
    RS = np.empty((T + 1, rdim))
    CS[0] = c0
    RS[0] = r0
    for t in range(T):
        y = ys[t]
        r = RS[t]
        f = sigmoid(W_fy @ y + W_fr @ r + b_f)
        i = sigmoid(W_iy @ y + W_ir @ r + b_i)
        o = sigmoid(W_oy @ y + W_or @ r + b_o)
        g = np.tanh(W_cy @ y + W_cr @ r + b_c)
        c = f * CS[t] + i * g
        a = o * np.tanh(c)
        x = W_xa @ a + b_x
        F[t] = f
        I[t] = i
        O[t] = o
        G[t] = g
        CS[t + 1] = c
        A[t] = a
        X[t] = x
        if jordan:
            RS[t + 1] = x
        else:
            RS[t + 1] = a
    return X, A, F, I, O, G, CS, RS


@_jit
def lstm_backward(ys, targets, A, F, I, O, G, CS, RS, X,
                  W_fr, W_ir, W_or, W_cr, W_xa, jordan):
    """Exact LSTM gradients of the time-and-state averaged squared error.

    Backpropagates through every recurrent path: the cell state chain and,
    depending on ``jordan``, either the hidden-to-gate or the
    output-to-gate connections. Returns loss followed by the 14 gradient
    arrays in parameter order (W_fy, W_iy, W_oy, W_cy, W_fr, W_ir, W_or,
    W_cr, W_xa, b_f, b_i, b_o, b_c, b_x).
    """
    T = ys.shape[0]
    m = ys.shape[1]
    h = A.shape[1]
    n = X.shape[1]
    rdim = RS.shape[1]
    gW_fy = np.zeros((h, m))
    gW_iy = np.zeros((h, m))
    gW_oy = np.zeros((h, m))
    gW_cy = np.zeros((h, m))
    gW_fr = np.zeros((h, rdim))
    gW_ir = np.zeros((h, rdim))
    gW_or = np.zeros((h, rdim))
    gW_cr = np.zeros((h, rdim))
    gW_xa = np.zeros((n, h))
    gb_f = np.zeros(h)
    gb_i = np.zeros(h)
    gb_o = np.zeros(h)
    gb_c = np.zeros(h)
    gb_x = np.zeros(n)
    W_xaT = W_xa.T.copy()
    W_frT = W_fr.T.copy()
    W_irT = W_ir.T.copy()
    W_orT = W_or.T.copy()
    W_crT = W_cr.T.copy()
    scale = 2.0 / (T * n)
    sq = 0.0
    dr = np.zeros(rdim)
    dc_carry = np.zeros(h)
    for t in range(T - 1, -1, -1):
        res = X[t] - targets[t]
        sq += res @ res
        dx = scale * res
        if jordan:
            dx = dx + dr
        a = A[t]
        gW_xa += dx.reshape((n, 1)) * a.reshape((1, h))
        gb_x += dx
        da = W_xaT @ dx
        if not jordan:
            da = da + dr
        f = F[t]
        i = I[t]
        o = O[t]
        g = G[t]
        tc = np.tanh(CS[t + 1])
        dzo = da * tc * o * (1.0 - o)
        dc = da * o * (1.0 - tc * tc) + dc_carry
        dzf = dc * CS[t] * f * (1.0 - f)
        dzi = dc * g * i * (1.0 - i)
        dzg = dc * i * (1.0 - g * g)
        dc_carry = dc * f
        y = ys[t]
        r = RS[t]
        yrow = y.reshape((1, m))
        rrow = r.reshape((1, rdim))
        gW_fy += dzf.reshape((h, 1)) * yrow
        gW_iy += dzi.reshape((h, 1)) * yrow
        gW_oy += dzo.reshape((h, 1)) * yrow
        gW_cy += dzg.reshape((h, 1)) * yrow
        gW_fr += dzf.reshape((h, 1)) * rrow
        gW_ir += dzi.reshape((h, 1)) * rrow
        gW_or += dzo.reshape((h, 1)) * rrow
        gW_cr += dzg.reshape((h, 1)) * rrow
        gb_f += dzf
        gb_i += dzi
        gb_o += dzo
        gb_c += dzg
        dr = W_frT @ dzf + W_irT @ dzi + W_orT @ dzo + W_crT @ dzg
    loss = sq / (T * n)
    return (loss, gW_fy, gW_iy, gW_oy, gW_cy, gW_fr, gW_ir, gW_or, gW_cr,
            gW_xa, gb_f, gb_i, gb_o, gb_c, gb_x)


def warmup():
    """Compile every kernel on tiny inputs (no-op in fallback mode)."""
    ys = np.zeros((2, 1))
    targets = np.zeros((2, 1))
    r0 = np.zeros(1)
    c0 = np.zeros(1)
    w = np.zeros((1, 1))
    b = np.zeros(1)
    for jordan in (False, True):
        X, A, RS = rnn_forward(ys, r0, w, w, w, b, b, jordan)
        rnn_backward(ys, targets, A, X, RS, w, w, jordan)
        X, A, F, I, O, G, CS, RS = lstm_forward(
            ys, r0, c0, w, w, w, w, w, w, w, w, w, b, b, b, b, b, jordan)
        lstm_backward(ys, targets, A, F, I, O, G, CS, RS, X, w, w, w, w, w, jordan)
