"""Adam and a full-batch training loop with best-so-far snapshots."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import volterra as V

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50_000
    l2: float = 0.0
    seed: int = 0
    tol: float = 1e-9
    patience: int = 100
    init_scale: float = 1e-3
    eval_every: int = 100

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")
        if self.l2 < 0:
            raise ValueError("l2 strength must be nonnegative")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              config: TrainConfig) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise ValueError(f"non-finite gradient in {bad.size} components, first at index {bad[0]}")
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    v = config.beta2 * state.v + (1.0 - config.beta2) * grads * grads
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    new = params - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return AdamState(m, v, t), new


@dataclass
class History:
    """``loss[e]`` is the objective after ``e`` updates."""

    loss: list = field(default_factory=list)
    heldout_vaf: dict = field(default_factory=dict)
    best_epoch: int = 0
    converged: bool = False

    @property
    def best_loss(self) -> float:
        return self.loss[self.best_epoch]

    def rows(self):
        for e, value in enumerate(self.loss):
            yield e, value, self.heldout_vaf.get(e)


def minimize(fun: Callable, theta0: np.ndarray, config: TrainConfig,
             monitor: Callable | None = None) -> tuple[np.ndarray, History]:
    """Full-batch Adam on ``fun(theta) -> (value, grad)``.

    Runs until the epoch budget is spent or the loss changes by less than
    ``tol`` (relative) over ``patience`` epochs, and returns the best
    parameters seen.  ``monitor(theta)`` is recorded every ``eval_every``
    epochs and at the end.
    """
    theta = np.array(theta0, dtype=np.float64)
    hist = History()
    state = AdamState.zeros(theta.size)
    best = theta.copy()
    best_value = np.inf
    for epoch in range(config.epochs + 1):
        value, grad = fun(theta)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
        hist.loss.append(value)
        if value < best_value:
            best_value, best, hist.best_epoch = value, theta.copy(), epoch
        if monitor is not None and epoch % config.eval_every == 0:
            hist.heldout_vaf[epoch] = monitor(theta)
        if epoch >= config.patience:
            ref = hist.loss[epoch - config.patience]
            if abs(ref - value) <= config.tol * abs(ref):
                hist.converged = True
                break
        if epoch == config.epochs:
            break
        state, theta = adam_step(state, theta, grad, config)
    if monitor is not None:
        hist.heldout_vaf[len(hist.loss) - 1] = monitor(theta)
    log.debug("adam stopped after %d epochs, best loss %.6g at epoch %d",
              len(hist.loss) - 1, best_value, hist.best_epoch)
    return best, hist


def train(model: V.VolterraModel, dataset: V.Dataset, config: TrainConfig = TrainConfig(),
          heldout: V.Dataset | None = None) -> tuple[V.VolterraModel, History]:
    """Fit ``model`` to ``dataset``; the model passed in is the starting point."""
    spec = model.spec
    obj = V.Objective(spec, dataset, config.l2, model.input_offset)
    monitor = None
    if heldout is not None:
        ho = V.Objective(spec, heldout, input_offset=model.input_offset)
        ref = ho.y

        def monitor(theta):
            return V.vaf(ref, ho.predict(theta))

    theta, hist = minimize(obj.value_and_grad, V.flatten_model(model), config, monitor)
    return V.unflatten_model(theta, spec, model.sample_rate, model.input_offset), hist
