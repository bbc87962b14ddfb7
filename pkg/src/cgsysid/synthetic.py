"""Learning a discretized log-kernel integral operator from noisy samples.

The operator ``f -> int_0^1 log|t - s| f(s) ds`` is discretized with
piecewise-constant basis functions on ``N`` cells and collocated at the cell
midpoints.  Dense, hierarchical, and symmetric-Toeplitz linear maps are fitted
to random noisy transform samples, and :func:`min_samples_for_accuracy`
searches for the smallest training set that reaches a held-out VAF target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from . import optim
from .volterra import vaf

log = logging.getLogger(__name__)

MODEL_CLASSES = ("toeplitz_sym", "hierarchical", "dense")
DEFAULT_SIGMAS = (0.01, 0.03, 0.1, 0.3, 1.0)
SYNTH_CONFIG = optim.TrainConfig(lr=1e-2, epochs=5000, tol=1e-7, patience=50)


def _xlogx2(x: float) -> float:
    # x * log(x^2), continuous extension with value 0 at x = 0
    return 0.0 if x == 0.0 else x * math.log(x * x)


def integral_kernel_entry(t: float, a: float, b: float) -> float:
    """``int_a^b log|t - s| ds`` via its closed-form antiderivative."""
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    return -(b - a) - 0.5 * (_xlogx2(t - b) - _xlogx2(t - a))


@dataclass
class IntegralOperator:
    N: int
    matrix: K.DenseKernel
    points: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return self.matrix.values


def build_operator(N: int) -> IntegralOperator:
    if not K._is_pow2(N):
        raise ValueError(f"N must be a power of two, got {N}")
    points = (np.arange(1, N + 1) - 0.5) / N
    A = np.array([[integral_kernel_entry(t, (j - 1) / N, j / N) for j in range(1, N + 1)]
                  for t in points])
    return IntegralOperator(N, K.DenseKernel(A), points)


@dataclass
class OperatorSample:
    f: np.ndarray
    target: np.ndarray
    sigma: float


def _sample_arrays(op: IntegralOperator, m: int, sigma: float, seed) -> tuple[np.ndarray, np.ndarray]:
    # separate streams for inputs and noise, so the first m samples of a
    # larger draw are the m-sample draw and sigma only rescales the noise
    f_seq, e_seq = np.random.SeedSequence(seed).spawn(2)
    F = np.random.default_rng(f_seq).standard_normal((m, op.N))
    E = np.random.default_rng(e_seq).standard_normal((m, op.N))
    return F, F @ op.A.T + sigma * E


def gen_samples(op: IntegralOperator, m: int, sigma: float, seed=0) -> list[OperatorSample]:
    if m < 0 or sigma < 0:
        raise ValueError("need m >= 0 and sigma >= 0")
    F, Y = _sample_arrays(op, m, sigma, seed)
    return [OperatorSample(f, y, sigma) for f, y in zip(F, Y)]


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    F = np.array([s.f for s in samples])
    Y = np.array([s.target for s in samples])
    return F, Y


def class_spec(model_class: str, N: int, k: int = 1, leaf_size: int = 2) -> K.KernelSpec:
    if model_class not in MODEL_CLASSES:
        raise ValueError(f"unknown model class {model_class!r}; choose from {MODEL_CLASSES}")
    return K.KernelSpec(model_class, 2, N, k, leaf_size)


class OperatorObjective:
    """Mean squared output error of a linear map, via Gram matrices.

    ``sum_s |M f_s - y_s|^2 = tr(M C M^T) - 2 tr(M B) + |Y|^2`` with
    ``C = F^T F`` and ``B = F^T Y``, so each evaluation costs O(N^3)
    regardless of the number of samples.
    """

    def __init__(self, spec: K.KernelSpec, F: np.ndarray, Y: np.ndarray, l2: float = 0.0):
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        if F.shape != Y.shape or F.shape[1] != spec.n or F.shape[0] == 0:
            raise ValueError(f"inputs {F.shape} and targets {Y.shape} do not fit {spec}")
        self.spec = spec
        self.l2 = float(l2)
        self.C = F.T @ F
        self.B = F.T @ Y
        self.yy = float(np.sum(Y * Y))
        self.scale = 1.0 / Y.size
        self._eye = np.eye(spec.n)

    def matrix(self, theta: np.ndarray) -> np.ndarray:
        return K.apply_batch(self.spec, theta, self._eye).T

    def value_and_grad(self, theta: np.ndarray):
        M = self.matrix(theta)
        MC = M @ self.C
        sse = float(np.sum(MC * M)) - 2.0 * float(np.sum(M * self.B.T)) + self.yy
        value = self.scale * max(sse, 0.0) + self.l2 * float(theta @ theta)
        G = 2.0 * self.scale * (MC - self.B.T)
        # <G, M(theta)> = sum_s G[:, s] . M e_s
        grad = K.apply_batch_grad(self.spec, theta, self._eye, G.T)
        if self.l2:
            grad = grad + 2.0 * self.l2 * theta
        return value, grad


def initial_params(spec: K.KernelSpec, seed=0, scale: float = 1e-3) -> np.ndarray:
    theta = np.zeros(K.param_count(spec))
    if spec.repr == "hierarchical":
        rng = np.random.default_rng(seed)
        for name, seg, _ in K.layout(spec):
            if name.startswith("level"):
                theta[seg] = rng.uniform(-scale, scale, seg.stop - seg.start)
    return theta


def heldout_set(op: IntegralOperator, m: int = 256, seed=12345) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless held-out pairs (inputs, exact transforms)."""
    return _sample_arrays(op, m, 0.0, seed)


def operator_vaf(matrix: np.ndarray, heldout: tuple[np.ndarray, np.ndarray]) -> float:
    F, Y = heldout
    return vaf(Y.ravel(), (F @ matrix.T).ravel())


def fit_arrays(model_class: str, F: np.ndarray, Y: np.ndarray, heldout,
               config: optim.TrainConfig = SYNTH_CONFIG, k: int = 1, leaf_size: int = 2):
    spec = class_spec(model_class, F.shape[1], k, leaf_size)
    obj = OperatorObjective(spec, F, Y, config.l2)
    theta, _ = optim.minimize(obj.value_and_grad, initial_params(spec, config.seed, config.init_scale),
                              config)
    fitted = K.unflatten(theta, spec)
    return fitted, operator_vaf(obj.matrix(theta), heldout)


def fit_operator(model_class: str, samples, heldout, config: optim.TrainConfig = SYNTH_CONFIG,
                 k: int = 1, leaf_size: int = 2):
    """Fit one model class; returns (fitted kernel, held-out VAF in percent)."""
    if len(samples) == 0:
        raise ValueError("training set is empty")
    F, Y = stack(samples)
    return fit_arrays(model_class, F, Y, heldout, config, k, leaf_size)


@dataclass
class SearchResult:
    model_class: str
    sigma: float
    m_star: int
    median_vaf: float
    saturated: bool
    evaluated: dict = field(default_factory=dict)


def _median_vaf(model_class, op, m, sigma, heldout, config, repeats, seed, pools) -> float:
    vafs = []
    for rep in range(repeats):
        if rep not in pools:
            pools[rep] = _sample_arrays(op, pools["cap"], 1.0, [seed, rep])
        F, Ynoise = pools[rep]
        clean = F[:m] @ op.A.T
        Y = clean + sigma * (Ynoise[:m] - clean)
        cfg = config.with_(seed=config.seed + rep)
        vafs.append(fit_arrays(model_class, F[:m], Y, heldout, cfg)[1])
    return float(np.median(vafs))


def min_samples_for_accuracy(model_class: str, sigma: float, target_vaf: float = 95.0,
                             config: optim.TrainConfig = SYNTH_CONFIG, N: int = 16,
                             repeats: int = 5, cap: int = 8192, seed: int = 0,
                             op: IntegralOperator | None = None, heldout=None) -> SearchResult:
    """Smallest training-set size whose median held-out VAF over ``repeats``
    draws reaches ``target_vaf``: doubling from 1, then integer bisection.

    Repeat ``r`` uses a fixed pool of ``cap`` samples (seeded by
    ``[seed, r]``) and trains on its first ``m``, so every class and every
    ``sigma`` sees the same inputs and the same standardized noise.
    """
    op = op or build_operator(N)
    heldout = heldout if heldout is not None else heldout_set(op)
    pools = {"cap": cap}
    seen: dict[int, float] = {}

    def ok(m):
        if m not in seen:
            seen[m] = _median_vaf(model_class, op, m, sigma, heldout, config, repeats, seed, pools)
            log.debug("%s sigma=%g m=%d median VAF %.3f", model_class, sigma, m, seen[m])
        return seen[m] >= target_vaf

    m = 1
    while not ok(m):
        if m >= cap:
            return SearchResult(model_class, sigma, cap, seen[cap], True, seen)
        m = min(2 * m, cap)
    lo, hi = m // 2, m  # ok(hi); lo == 0 or not ok(lo)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return SearchResult(model_class, sigma, hi, seen[hi], False, seen)


@dataclass
class ExperimentReport:
    header: tuple
    rows: list

    def to_csv(self, path) -> None:
        from .io import write_rows

        write_rows(path, self.header, self.rows)


def sweep(sigmas=DEFAULT_SIGMAS, classes=MODEL_CLASSES, target_vaf: float = 95.0,
          config: optim.TrainConfig = SYNTH_CONFIG, N: int = 16, repeats: int = 5,
          cap: int = 8192, seed: int = 0) -> ExperimentReport:
    """Run the search over every (sigma, class) cell, rows in grid order."""
    op = build_operator(N)
    heldout = heldout_set(op)
    rows = []
    for sigma in sigmas:
        for cls in classes:
            res = min_samples_for_accuracy(cls, sigma, target_vaf, config, N, repeats, cap,
                                           seed, op, heldout)
            log.info("sigma=%g %s: m*=%d (median VAF %.3f)%s", sigma, cls, res.m_star,
                     res.median_vaf, " saturated" if res.saturated else "")
            rows.append((cls, float(sigma), res.m_star, res.median_vaf, int(res.saturated)))
    return ExperimentReport(("class", "sigma", "m_star", "median_vaf", "saturated_flag"), rows)
