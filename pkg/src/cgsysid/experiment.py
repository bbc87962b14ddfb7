"""Training-budget curves on the simulated filament.

Each (class, budget, repeat) cell trains on a fresh excitation of ``budget``
valid samples (plus ``n - 1`` warm-up samples), picks its hyperparameters on
an independent validation signal, and reports VAF on a third, test signal.
Validation and test signals are 4 s long and shared by all cells of a run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from . import optim
from . import volterra as V
from .filament import FilamentParams, make_dataset
from .signals import DEFAULT_RATE, excitation
from .synthetic import ExperimentReport

log = logging.getLogger(__name__)

FILAMENT_CLASSES = ("linear", "dense", "hierarchical")
FILAMENT_MEMORY = 128
HELDOUT_SECONDS = 4.0
L2_GRID = (0.0, 1e-3, 1e-2, 1e-1)
OFFSET_MODES = ("none", "mean")
FILAMENT_CONFIG = optim.TrainConfig(lr=1e-2, epochs=1500, tol=1e-9, patience=100)

# seed streams, so training, validation and test signals never share draws
_TRAIN, _VALID, _TEST = 0, 1, 2


def class_model_spec(name: str, n: int = FILAMENT_MEMORY, k: int = 1,
                     leaf_size: int = 2) -> V.ModelSpec:
    """D=1 for ``linear``; D=2 with a dense or hierarchical order-2 kernel."""
    if name == "linear":
        return V.ModelSpec(n)
    if name in ("dense", "hierarchical"):
        return V.ModelSpec(n, {2: K.KernelSpec(name, 2, n, k, leaf_size)})
    raise ValueError(f"unknown model class {name!r}; choose from {FILAMENT_CLASSES}")


def filament_data(length: int, seed, params: FilamentParams = FilamentParams(),
                  sample_rate: float = DEFAULT_RATE) -> V.Dataset:
    return make_dataset(excitation(length, seed=seed, sample_rate=sample_rate), params)


def offset_value(mode: str, dataset: V.Dataset) -> float:
    if mode == "none":
        return 0.0
    if mode == "mean":
        return float(dataset.input.samples.mean())
    raise ValueError(f"unknown offset mode {mode!r}; choose from {OFFSET_MODES}")


@dataclass
class Cell:
    model_class: str
    budget: int
    repeat: int
    l2: float
    offset_mode: str
    validation_vaf: float
    test_vaf: float


def fit_cell(spec: V.ModelSpec, train: V.Dataset, validation: V.Dataset, test: V.Dataset,
             l2_grid=L2_GRID, offsets=OFFSET_MODES, config: optim.TrainConfig = FILAMENT_CONFIG,
             seed: int = 0) -> tuple[float, str, float, float]:
    """Grid search over (offset mode, l2) on the validation signal.

    Returns ``(l2, offset_mode, validation_vaf, test_vaf)`` of the winner;
    ties go to the earlier grid point.
    """
    best = None
    for mode in offsets:
        off = offset_value(mode, train)
        for l2 in l2_grid:
            cfg = config.with_(l2=float(l2), seed=seed)
            model = V.init_model(spec, seed, cfg.init_scale, train.input.sample_rate, off)
            model, _ = optim.train(model, train, cfg)
            v = V.heldout_vaf(model, validation)
            log.debug("offset=%s l2=%g validation VAF %.4f", mode, l2, v)
            if best is None or v > best[2]:
                best = (float(l2), mode, v, model)
    l2, mode, v, model = best
    return l2, mode, v, V.heldout_vaf(model, test)


def budget_curve(budgets, classes=FILAMENT_CLASSES, seed: int = 0, repeats: int = 1,
                 n: int = FILAMENT_MEMORY, l2_grid=L2_GRID, offsets=OFFSET_MODES,
                 config: optim.TrainConfig = FILAMENT_CONFIG,
                 params: FilamentParams = FilamentParams(),
                 sample_rate: float = DEFAULT_RATE) -> tuple[ExperimentReport, list[Cell]]:
    """Held-out VAF per (budget, class), median over ``repeats`` training draws.

    ``budgets`` count valid training samples.  The report has one row per
    (budget, class) in grid order.
    """
    budgets = [int(b) for b in budgets]
    if not budgets or min(budgets) < 1:
        raise ValueError("budgets must be positive sample counts")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    held = int(round(HELDOUT_SECONDS * sample_rate)) + n - 1
    validation = filament_data(held, [seed, _VALID], params, sample_rate)
    test = filament_data(held, [seed, _TEST], params, sample_rate)
    specs = {name: class_model_spec(name, n) for name in classes}
    cells: list[Cell] = []
    rows = []
    for budget in budgets:
        per_class = {name: [] for name in classes}
        for rep in range(repeats):
            train = filament_data(budget + n - 1, [seed, _TRAIN, budget, rep], params, sample_rate)
            for name in classes:
                l2, mode, v, t = fit_cell(specs[name], train, validation, test, l2_grid, offsets,
                                          config, seed=rep)
                cells.append(Cell(name, budget, rep, l2, mode, v, t))
                per_class[name].append(t)
                log.info("budget=%d %s rep=%d: l2=%g offset=%s test VAF %.4f",
                         budget, name, rep, l2, mode, t)
        for name in classes:
            rows.append((budget, name, float(np.median(per_class[name])), repeats))
    header = ("budget", "class", "median_heldout_vaf", "repeats")
    return ExperimentReport(header, rows), cells
