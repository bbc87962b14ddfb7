"""Discrete Volterra models: prediction, loss, gradient, and VAF."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels as K


@dataclass
class SignalSeries:
    """Uniformly sampled scalar series.

    ``valid_from`` marks the first sample that carries a real value; model
    predictions set it to ``n - 1`` because earlier samples lack history.
    """

    samples: np.ndarray
    sample_rate: float = 750.0
    valid_from: int = 0

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64).ravel()
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.isfinite(x))[0])
            raise ValueError(f"signal has a non-finite value at index {bad}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = x

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class Dataset:
    input: SignalSeries
    output: SignalSeries
    start: int = 0

    def __post_init__(self):
        if len(self.input) != len(self.output):
            raise ValueError(f"input has {len(self.input)} samples, output {len(self.output)}")

    def __len__(self) -> int:
        return len(self.input)

    def valid_start(self, n: int) -> int:
        """First sample with a full history window for memory ``n``."""
        return max(self.start, n - 1)


@dataclass(frozen=True)
class ModelSpec:
    """Memory ``n`` plus one :class:`KernelSpec` per order >= 2."""

    n: int
    kernels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not K._is_pow2(self.n):
            raise ValueError(f"memory n must be a power of two, got {self.n}")
        for order, ks in self.kernels.items():
            if order < 2 or ks.d != order or ks.n != self.n:
                raise ValueError(f"order-{order} kernel spec {ks} does not fit memory {self.n}")
        object.__setattr__(self, "kernels", dict(sorted(self.kernels.items())))

    @property
    def max_order(self) -> int:
        return max(self.kernels, default=1)

    def param_count(self) -> int:
        return 1 + self.n + sum(K.param_count(ks) for ks in self.kernels.values())

    def slices(self) -> dict:
        """Where each part lives in the model parameter vector."""
        out = {"h0": slice(0, 1), "h1": slice(1, 1 + self.n)}
        pos = 1 + self.n
        for order, ks in self.kernels.items():
            size = K.param_count(ks)
            out[order] = slice(pos, pos + size)
            pos += size
        return out


@dataclass
class VolterraModel:
    n: int
    h0: float = 0.0
    h1: np.ndarray | None = None
    kernels: dict = field(default_factory=dict)
    sample_rate: float = 750.0
    input_offset: float = 0.0  # subtracted from the input before windowing

    def __post_init__(self):
        self.input_offset = float(self.input_offset)
        self.h1 = np.zeros(self.n) if self.h1 is None else np.asarray(self.h1, dtype=np.float64)
        if self.h1.shape != (self.n,):
            raise ValueError(f"h1 has shape {self.h1.shape}, memory is {self.n}")
        self.h0 = float(self.h0)
        self.kernels = dict(sorted(self.kernels.items()))

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.n, {d: ker.spec for d, ker in self.kernels.items()})

    @property
    def max_order(self) -> int:
        return self.spec.max_order

    def param_count(self) -> int:
        return self.spec.param_count()


def zero_model(spec: ModelSpec, sample_rate: float = 750.0,
               input_offset: float = 0.0) -> VolterraModel:
    return unflatten_model(np.zeros(spec.param_count()), spec, sample_rate, input_offset)


def init_model(spec: ModelSpec, seed: int = 0, scale: float = 1e-3,
               sample_rate: float = 750.0, input_offset: float = 0.0) -> VolterraModel:
    """All zeros except hierarchical factor vectors, drawn uniform in
    ``[-scale, scale]``; an all-zero low-rank product has zero gradient."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.param_count())
    for order, sl in spec.slices().items():
        if order in ("h0", "h1"):
            continue
        ks = spec.kernels[order]
        if ks.repr != "hierarchical":
            continue
        for name, seg, _ in K.layout(ks):
            if name.startswith("level"):
                part = theta[sl][seg]
                part[:] = rng.uniform(-scale, scale, part.size)
    return unflatten_model(theta, spec, sample_rate, input_offset)


def flatten_model(model: VolterraModel) -> np.ndarray:
    parts = [np.array([model.h0]), model.h1]
    parts += [K.flatten(ker) for ker in model.kernels.values()]
    return np.concatenate(parts)


def unflatten_model(theta: np.ndarray, spec: ModelSpec, sample_rate: float = 750.0,
                    input_offset: float = 0.0) -> VolterraModel:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.param_count(),):
        raise ValueError(f"parameter vector of length {theta.size}, model needs {spec.param_count()}")
    sl = spec.slices()
    kernels = {d: K.unflatten(theta[sl[d]], ks) for d, ks in spec.kernels.items()}
    return VolterraModel(spec.n, float(theta[0]), theta[sl["h1"]].copy(), kernels, sample_rate,
                         input_offset)


def windows(x: np.ndarray, n: int) -> np.ndarray:
    """Row ``j`` is the history window at time ``t = n - 1 + j``, with
    ``w[i] = x[t - i]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < n:
        raise ValueError(f"signal of {x.size} samples is shorter than memory {n}")
    return sliding_window_view(x, n)[:, ::-1]


class Objective:
    """Mean squared error plus ``l2 * |theta|^2`` on one dataset.

    The window matrix is built once, in lag-major layout, so repeated
    evaluation during training only pays for the contractions.
    """

    def __init__(self, spec: ModelSpec, dataset: Dataset, l2: float = 0.0,
                 input_offset: float = 0.0):
        self.spec = spec
        self.l2 = float(l2)
        n = spec.n
        start = dataset.valid_start(n)
        if len(dataset) < n:
            raise ValueError(f"dataset of {len(dataset)} samples is shorter than memory {n}")
        if start >= len(dataset):
            raise ValueError("dataset has an empty valid range")
        W = windows(dataset.input.samples - input_offset, n)[start - (n - 1):]
        self.wt = np.ascontiguousarray(W.T)[None]
        self.y = dataset.output.samples[start:]
        self._slices = spec.slices()

    @property
    def size(self) -> int:
        return self.y.size

    def predict(self, theta: np.ndarray) -> np.ndarray:
        sl = self._slices
        out = theta[0] + theta[sl["h1"]] @ self.wt[0]
        for order, ks in self.spec.kernels.items():
            out += K.contract(ks, theta[sl[order]], self.wt, lag_major=True)
        return out

    def value(self, theta: np.ndarray) -> float:
        resid = self.predict(theta) - self.y
        return float(resid @ resid) / self.size + self.l2 * float(theta @ theta)

    def value_and_grad(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        resid = self.predict(theta) - self.y
        value = float(resid @ resid) / self.size + self.l2 * float(theta @ theta)
        r = (2.0 / self.size) * resid
        grad = np.empty_like(theta)
        sl = self._slices
        grad[0] = r.sum()
        grad[sl["h1"]] = self.wt[0] @ r
        for order, ks in self.spec.kernels.items():
            grad[sl[order]] = K.contract_grad(ks, theta[sl[order]], self.wt, r, lag_major=True)
        if self.l2:
            grad += 2.0 * self.l2 * theta
        return value, grad


def predict(model: VolterraModel, input: SignalSeries) -> SignalSeries:
    """Model output; samples before ``n - 1`` are zero and marked invalid."""
    x = input.samples if isinstance(input, SignalSeries) else np.asarray(input, dtype=np.float64)
    n = model.n
    if x.size < n:
        raise ValueError(f"input of {x.size} samples is shorter than memory {n}")
    wt = np.ascontiguousarray(windows(x - model.input_offset, n).T)[None]
    y = model.h0 + model.h1 @ wt[0]
    for ker in model.kernels.values():
        y += K.contract(ker.spec, K.flatten(ker), wt, lag_major=True)
    out = np.zeros(x.size)
    out[n - 1:] = y
    rate = input.sample_rate if isinstance(input, SignalSeries) else model.sample_rate
    return SignalSeries(out, rate, valid_from=n - 1)


def vaf(reference, prediction, start: int | None = None, stop: int | None = None) -> float:
    """Variance accounted for, in percent, over ``[start, stop)``.

    Both variances subtract their mean, so a constant offset in the
    prediction costs nothing.  ``start`` defaults to the later
    ``valid_from`` of the two series.
    """
    if start is None:
        start = max(getattr(reference, "valid_from", 0), getattr(prediction, "valid_from", 0))
    ref = reference.samples if isinstance(reference, SignalSeries) else np.asarray(reference, dtype=np.float64)
    pred = prediction.samples if isinstance(prediction, SignalSeries) else np.asarray(prediction, dtype=np.float64)
    if ref.shape != pred.shape:
        raise ValueError(f"reference {ref.shape} and prediction {pred.shape} differ in length")
    ref, pred = ref[start:stop], pred[start:stop]
    var_ref = np.var(ref)
    if ref.size == 0 or var_ref <= 0.0:
        raise ValueError("reference has zero variance on the evaluated range")
    return float(100.0 * (1.0 - np.var(ref - pred) / var_ref))


def loss(model: VolterraModel, dataset: Dataset, l2: float = 0.0) -> float:
    return Objective(model.spec, dataset, l2, model.input_offset).value(flatten_model(model))


def loss_grad(model: VolterraModel, dataset: Dataset, l2: float = 0.0) -> np.ndarray:
    """Gradient of :func:`loss` in :func:`flatten_model` order."""
    obj = Objective(model.spec, dataset, l2, model.input_offset)
    return obj.value_and_grad(flatten_model(model))[1]


def heldout_vaf(model: VolterraModel, dataset: Dataset) -> float:
    pred = predict(model, dataset.input)
    return vaf(dataset.output, pred, start=dataset.valid_start(model.n))

