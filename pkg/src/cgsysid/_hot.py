"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``CGSYSID_BACKEND`` (``numba`` or
``numpy``); ``CGSYSID_DISABLE_NUMBA=1`` or ``NUMBA_DISABLE_JIT=1`` force
numpy.  :func:`use_backend` switches it temporarily, which is what the tests
and the benchmark do to compare both paths on the same inputs.

Hierarchical kernels are handed over as a plan object (see
``kernels.hplan``) plus the flat parameter vector.  Window stacks ``ws`` have
shape ``(m, T, n)`` with ``m == 1`` (same vector on every axis) or ``m == d``.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _initial_backend() -> str:
    if os.environ.get("CGSYSID_DISABLE_NUMBA", "0") not in ("", "0"):
        return "numpy"
    if os.environ.get("NUMBA_DISABLE_JIT", "0") not in ("", "0"):
        return "numpy"
    name = os.environ.get("CGSYSID_BACKEND", "numba" if HAVE_NUMBA else "numpy")
    if name not in ("numba", "numpy"):
        raise ValueError(f"CGSYSID_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


BACKEND = _initial_backend()


def get_backend() -> str:
    return BACKEND


def set_backend(name: str) -> None:
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    BACKEND = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


# ---------------------------------------------------------------------------
# hierarchical contraction: numba, streaming over time for each factor vector


TILE = 512  # time samples per cache tile in the numba kernels


@njit(cache=True, fastmath=True)
def _nb_hier_forward(theta, wt, k, d, blk_start, blk_side, blk_off,
                     leaf_start, leaf_off, leaf_side, out):
    m = wt.shape[0]
    T = wt.shape[2]
    dot = np.empty(TILE)
    prod = np.empty(TILE)
    size = leaf_side ** d
    out[:] = 0.0
    for t0 in range(0, T, TILE):
        t1 = min(t0 + TILE, T)
        w = t1 - t0
        for b in range(blk_start.shape[0]):
            s = blk_side[b]
            for g in range(k):
                for a in range(d):
                    lags = wt[min(a, m - 1)]
                    o = blk_off[b, a]
                    base = blk_start[b] + (g * d + a) * s
                    dot[:w] = 0.0
                    for i in range(s):
                        c = theta[base + i]
                        row = lags[o + i, t0:t1]
                        for t in range(w):
                            dot[t] += c * row[t]
                    if a == 0:
                        prod[:w] = dot[:w]
                    else:
                        for t in range(w):
                            prod[t] *= dot[t]
                for t in range(w):
                    out[t0 + t] += prod[t]
        for q in range(leaf_start.shape[0]):
            p = leaf_start[q]
            o = leaf_off[q]
            for flat in range(size):
                c = theta[p + flat]
                if c == 0.0:
                    continue
                prod[:w] = c
                rem = flat
                for a in range(d - 1, -1, -1):
                    row = wt[min(a, m - 1), o + rem % leaf_side, t0:t1]
                    rem //= leaf_side
                    for t in range(w):
                        prod[t] *= row[t]
                for t in range(w):
                    out[t0 + t] += prod[t]


@njit(cache=True, fastmath=True)
def _nb_hier_backward(theta, wt, weights, k, d, blk_start, blk_side, blk_off,
                      leaf_start, leaf_off, leaf_side, grad):
    m = wt.shape[0]
    T = wt.shape[2]
    dots = np.empty((d, TILE))
    coef = np.empty(TILE)
    size = leaf_side ** d
    for t0 in range(0, T, TILE):
        t1 = min(t0 + TILE, T)
        w = t1 - t0
        r = weights[t0:t1]
        for b in range(blk_start.shape[0]):
            s = blk_side[b]
            for g in range(k):
                for a in range(d):
                    lags = wt[min(a, m - 1)]
                    o = blk_off[b, a]
                    base = blk_start[b] + (g * d + a) * s
                    dots[a, :w] = 0.0
                    for i in range(s):
                        c = theta[base + i]
                        row = lags[o + i, t0:t1]
                        for t in range(w):
                            dots[a, t] += c * row[t]
                for a in range(d):
                    coef[:w] = r
                    for a2 in range(d):
                        if a2 != a:
                            for t in range(w):
                                coef[t] *= dots[a2, t]
                    lags = wt[min(a, m - 1)]
                    o = blk_off[b, a]
                    base = blk_start[b] + (g * d + a) * s
                    for i in range(s):
                        row = lags[o + i, t0:t1]
                        acc = 0.0
                        for t in range(w):
                            acc += coef[t] * row[t]
                        grad[base + i] += acc
        for q in range(leaf_start.shape[0]):
            p = leaf_start[q]
            o = leaf_off[q]
            for flat in range(size):
                coef[:w] = r
                rem = flat
                for a in range(d - 1, -1, -1):
                    row = wt[min(a, m - 1), o + rem % leaf_side, t0:t1]
                    rem //= leaf_side
                    for t in range(w):
                        coef[t] *= row[t]
                acc = 0.0
                for t in range(w):
                    acc += coef[t]
                grad[p + flat] += acc


# ---------------------------------------------------------------------------
# hierarchical contraction: numpy, one batched matmul per level and axis half


def _axis(wt, a):
    return wt[min(a, wt.shape[0] - 1)]


def _np_level_dots(theta, wt, plan, level):
    """Inner products of every factor vector on one split level with the
    matching window segments; shape (d, P, M, k, T)."""
    start, nodes, half = level
    d, k = plan.d, plan.k
    M = plan.bits.shape[0]
    T = wt.shape[2]
    F = theta[start:start + nodes * M * k * d * half].reshape(nodes, M, k, d, half)
    dots = np.empty((d, nodes, M, k, T))
    for a in range(d):
        seg = _axis(wt, a).reshape(nodes, 2, half, T)
        Fa = F[:, :, :, a, :]
        for beta in (0, 1):
            sel = np.flatnonzero(plan.bits[:, a] == beta)
            if sel.size == 0:
                continue
            # (P, Msel*k, h) @ (P, h, T)
            lhs = Fa[:, sel].reshape(nodes, sel.size * k, half)
            dots[a][:, sel] = np.matmul(lhs, seg[:, beta]).reshape(nodes, sel.size, k, T)
    return dots


def _np_leaf_forward(theta, wt, d, start, count, side):
    T = wt.shape[2]
    Lf = theta[start:start + count * side ** d]
    # contract the last axis first; Z has shape (Q, side**j, T)
    Z = np.matmul(Lf.reshape(count, side ** (d - 1), side),
                  _axis(wt, d - 1).reshape(count, side, T))
    for a in range(d - 2, -1, -1):
        Wa = _axis(wt, a).reshape(count, 1, side, T)
        Z = (Z.reshape(count, side ** a, side, T) * Wa).sum(axis=2)
    return Z.reshape(count, T).sum(axis=0)


def _np_leaf_backward(wt, weights, d, count, side):
    T = wt.shape[2]
    acc = _axis(wt, 0).reshape(count, side, T) * weights
    for a in range(1, d - 1):
        Wa = _axis(wt, a).reshape(count, 1, side, T)
        acc = (acc[:, :, None, :] * Wa).reshape(count, -1, T)
    if d == 1:
        return acc.sum(axis=2).ravel()
    last = _axis(wt, d - 1).reshape(count, side, T)
    return np.matmul(acc, last.transpose(0, 2, 1)).ravel()


def _np_hier_forward(theta, wt, plan):
    out = np.zeros(wt.shape[2])
    for level in plan.levels:
        dots = _np_level_dots(theta, wt, plan, level)
        out += np.prod(dots, axis=0).sum(axis=(0, 1, 2))
    if plan.leaf_count:
        out += _np_leaf_forward(theta, wt, plan.d, plan.leaf_start, plan.leaf_count, plan.leaf_side)
    return out


def _np_hier_backward(theta, wt, weights, plan):
    d, k = plan.d, plan.k
    M = plan.bits.shape[0]
    grad = np.zeros_like(theta)
    for level in plan.levels:
        start, nodes, half = level
        dots = _np_level_dots(theta, wt, plan, level)
        G = grad[start:start + nodes * M * k * d * half].reshape(nodes, M, k, d, half)
        for a in range(d):
            coef = np.broadcast_to(weights, dots.shape[1:]).copy()
            for a2 in range(d):
                if a2 != a:
                    coef *= dots[a2]
            seg = _axis(wt, a).reshape(nodes, 2, half, -1)
            Ga = G[:, :, :, a, :]
            for beta in (0, 1):
                sel = np.flatnonzero(plan.bits[:, a] == beta)
                if sel.size == 0:
                    continue
                # (P, Msel*k, T) @ (P, T, h)
                lhs = coef[:, sel].reshape(nodes, sel.size * k, -1)
                Ga[:, sel] = np.matmul(lhs, seg[:, beta].transpose(0, 2, 1)).reshape(
                    nodes, sel.size, k, half)
    if plan.leaf_count:
        n_leaf = plan.leaf_count * plan.leaf_side ** d
        grad[plan.leaf_start:plan.leaf_start + n_leaf] = _np_leaf_backward(
            wt, weights, d, plan.leaf_count, plan.leaf_side)
    return grad


# ---------------------------------------------------------------------------
# dispatch; all window stacks here are lag-major, shape (m, n, T)


def lag_major(ws) -> np.ndarray:
    """Convert time-major windows (T, n) or (m, T, n) to lag-major (m, n, T)."""
    ws = np.asarray(ws, dtype=np.float64)
    if ws.ndim == 2:
        ws = ws[None]
    return np.ascontiguousarray(ws.transpose(0, 2, 1))


def hier_forward(theta, wt, plan):
    """Contract a hierarchical kernel against every time column of ``wt``."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if BACKEND == "numba":
        out = np.empty(wt.shape[2])
        _nb_hier_forward(theta, wt, plan.k, plan.d,
                         plan.blk_start, plan.blk_side, plan.blk_off,
                         plan.leaf_starts, plan.leaf_offs, plan.leaf_side, out)
        return out
    return _np_hier_forward(theta, wt, plan)


def hier_backward(theta, wt, weights, plan):
    """Gradient of ``sum_t weights[t] * form_t`` with respect to ``theta``."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if BACKEND == "numba":
        grad = np.zeros_like(theta)
        _nb_hier_backward(theta, wt, weights, plan.k, plan.d,
                          plan.blk_start, plan.blk_side, plan.blk_off,
                          plan.leaf_starts, plan.leaf_offs, plan.leaf_side, grad)
        return grad
    return _np_hier_backward(theta, wt, weights, plan)


def dense_forward(values, wt):
    """Full contraction of a dense rank-d tensor (BLAS on both backends)."""
    if wt.shape[2] == 0:
        return np.zeros(0)
    return _np_leaf_forward(values.ravel(), wt, values.ndim, 0, 1, values.shape[0])


def dense_backward(wt, weights, d, n):
    weights = np.asarray(weights, dtype=np.float64)
    return _np_leaf_backward(wt, weights, d, 1, n).reshape((n,) * d)


# ---------------------------------------------------------------------------
# filament: classical RK4 with zero-order hold


@njit(cache=True)
def _nb_filament_rhs(T, V, k1, k2, k3, R0, alpha):
    T2 = T * T
    return k1 * V * V / (R0 * (1.0 + alpha * T)) - k2 * T2 - k3 * T2 * T2


@njit(cache=True)
def _nb_rk4_zoh(volts, T0, h, substeps, k1, k2, k3, R0, alpha, temps):
    T = T0
    clamped = 0
    bad = -1
    for idx in range(volts.shape[0]):
        V = volts[idx]
        for _ in range(substeps):
            a = _nb_filament_rhs(T, V, k1, k2, k3, R0, alpha)
            b = _nb_filament_rhs(T + 0.5 * h * a, V, k1, k2, k3, R0, alpha)
            c = _nb_filament_rhs(T + 0.5 * h * b, V, k1, k2, k3, R0, alpha)
            e = _nb_filament_rhs(T + h * c, V, k1, k2, k3, R0, alpha)
            T = T + h / 6.0 * (a + 2.0 * b + 2.0 * c + e)
            if not np.isfinite(T):
                if bad < 0:
                    bad = idx
            elif T < 0.0:
                T = 0.0
                clamped += 1
        temps[idx] = T
    return clamped, bad


def _py_rk4_zoh(volts, T0, h, substeps, k1, k2, k3, R0, alpha, temps):
    def rhs(T, V):
        T2 = T * T
        return k1 * V * V / (R0 * (1.0 + alpha * T)) - k2 * T2 - k3 * T2 * T2

    T = float(T0)
    clamped = 0
    bad = -1
    for idx, V in enumerate(volts.tolist()):
        for _ in range(substeps):
            a = rhs(T, V)
            b = rhs(T + 0.5 * h * a, V)
            c = rhs(T + 0.5 * h * b, V)
            e = rhs(T + h * c, V)
            T = T + h / 6.0 * (a + 2.0 * b + 2.0 * c + e)
            if not math.isfinite(T):
                if bad < 0:
                    bad = idx
            elif T < 0.0:
                T = 0.0
                clamped += 1
        temps[idx] = T
    return clamped, bad


def rk4_zoh(volts, T0, h, substeps, k1, k2, k3, R0, alpha):
    """Integrate the filament temperature; returns (temps, n_clamped, first_bad)."""
    volts = np.ascontiguousarray(volts, dtype=np.float64)
    temps = np.empty_like(volts)
    fn = _nb_rk4_zoh if BACKEND == "numba" else _py_rk4_zoh
    clamped, bad = fn(volts, float(T0), float(h), int(substeps),
                      float(k1), float(k2), float(k3), float(R0), float(alpha), temps)
    return temps, int(clamped), int(bad)
