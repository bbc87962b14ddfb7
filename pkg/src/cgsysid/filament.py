"""Tungsten-filament voltage to luminosity plant.

Temperature ``T`` follows ``dT/dt = k1 V^2 / R(T) - k2 T^2 - k3 T^4`` with
``R(T) = R0 (1 + alpha_r T)``; luminosity is ``L = k4 T^4``.  Units are
nondimensional; ``time_scale`` converts seconds to model time units.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import brentq

from . import _hot
from .volterra import Dataset, SignalSeries

log = logging.getLogger(__name__)

MIDPOINT_VOLTAGE = 0.75


@dataclass(frozen=True)
class FilamentParams:
    k1: float = 1.0
    k2: float = 0.3
    k3: float = 0.1
    k4: float = 1.0
    R0: float = 1.0
    alpha_r: float = 1.0
    T_init: float | None = None  # None: equilibrium at MIDPOINT_VOLTAGE
    time_scale: float = 40.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if f.name == "T_init":
                # a cold start at T = 0 is allowed
                if not (np.isfinite(value) and value >= 0):
                    raise ValueError(f"T_init must be nonnegative, got {value}")
            elif not (np.isfinite(value) and value > 0):
                raise ValueError(f"filament parameter {f.name} must be positive, got {value}")

    @property
    def initial_temperature(self) -> float:
        if self.T_init is not None:
            return self.T_init
        return equilibrium(MIDPOINT_VOLTAGE, self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "FilamentParams":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown filament parameters: {sorted(extra)}")
        return cls(**{k: (None if v is None else float(v)) for k, v in obj.items()})


def resistance(T: float, params: FilamentParams) -> float:
    return params.R0 * (1.0 + params.alpha_r * T)


def d_temperature(T: float, V: float, params: FilamentParams) -> float:
    if T < 0:
        raise ValueError(f"temperature must be nonnegative, got {T}")
    return params.k1 * V * V / resistance(T, params) - params.k2 * T ** 2 - params.k3 * T ** 4


def equilibrium(V: float, params: FilamentParams) -> float:
    """Unique nonnegative root of ``d_temperature(., V)``."""
    if V == 0:
        return 0.0
    hi = 1.0
    while d_temperature(hi, V, params) > 0:
        hi *= 2.0
    return brentq(lambda T: d_temperature(T, V, params), 0.0, hi, xtol=1e-15, rtol=1e-15)


@dataclass
class Simulation:
    temperature: SignalSeries
    luminosity: SignalSeries
    clamped: int


def simulate(voltage: SignalSeries, params: FilamentParams = FilamentParams(),
             substeps: int = 8) -> Simulation:
    """RK4 with zero-order hold on the voltage.

    Sample ``i`` holds the state after integrating across interval ``i``
    (driven by ``V[i]``), so the response has a lag-0 component.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = params.time_scale / voltage.sample_rate / substeps
    temps, clamped, bad = _hot.rk4_zoh(
        voltage.samples, params.initial_temperature, h, substeps,
        params.k1, params.k2, params.k3, params.R0, params.alpha_r)
    if bad >= 0:
        raise FloatingPointError(f"filament state became non-finite at sample {bad}")
    if clamped:
        log.info("temperature clamped at zero %d times", clamped)
    lum = params.k4 * temps ** 4
    rate = voltage.sample_rate
    return Simulation(SignalSeries(temps, rate), SignalSeries(lum, rate), clamped)


def make_dataset(voltage: SignalSeries, params: FilamentParams = FilamentParams(),
                 substeps: int = 8) -> Dataset:
    return Dataset(voltage, simulate(voltage, params, substeps).luminosity)
