"""
Mean-field ODEs and a fixed-step RK4 integrator.

The homogeneous field (scaled or per-slot), the AIFS-extended two-class
field, and trajectories carrying the derived attempt-rate / collision series.
All fields accept leading batch axes so many starts integrate together.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .fpe import FpeSolution, equilibrium_state, pi_coeffs
from .model import (OCCUPANCY_TOL, ClassParams, IntegrationError, OccupancyState, ScalingMode,
                    Scenario, collision_mfl, validate)

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray], np.ndarray]


def _stencil(phi: np.ndarray, q: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """
    Backoff-stage flow for one class.

    dphi_k = q_{k-1} phi_{k-1} gamma - q_k phi_k for k >= 1; stage 0 takes
    minus their sum, so the class total is conserved exactly.
    """
    flow = phi * q
    d = np.empty_like(flow)
    d[..., 1:] = flow[..., :-1] * np.expand_dims(gamma, -1) - flow[..., 1:]
    d[..., 0] = -d[..., 1:].sum(axis=-1)
    return d


def rhs_homogeneous(phi: np.ndarray, c: ClassParams, mode: ScalingMode = ScalingMode.SCALED,
                    N: Optional[int] = None) -> np.ndarray:
    """
    Homogeneous field for one class.

    Scaled mode: rates q, gamma = 1 - exp(-qbar), accelerated time. Raw mode:
    ``c.q`` holds p, gamma = 1 - exp(-N pbar) and time is in slots.
    """
    phi = np.asarray(phi, dtype=float)
    q = c.rates
    rate = phi @ q
    if ScalingMode(mode) is ScalingMode.RAW:
        if N is None:
            raise ValueError("raw mode needs the population size N")
        rate = N * rate
    return _stencil(phi, q, np.asarray(collision_mfl(rate)))


class MeanFieldModel:
    """
    The mean-field field of a scenario on the full stacked state vector
    (class H stages, then class L stages), in the scenario's own time unit.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = validate(scenario)
        self.classes = self.scenario.scaled_classes()
        self.rates = [c.rates for c in self.classes]
        self.sigmas = np.array(self.scenario.sigmas)
        self.stage_counts = self.scenario.stage_counts
        self.labels = tuple(c.label for c in self.classes)
        self.time_scale = self.scenario.time_scale
        self.delta = self.scenario.delta
        bounds = np.cumsum((0,) + self.stage_counts)
        self.slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        self.dim = int(bounds[-1])

    @property
    def heterogeneous(self) -> bool:
        return len(self.classes) == 2

    @property
    def max_rate(self) -> float:
        """Largest per-stage rate in the trajectory's own time unit."""
        return max(float(q.max()) for q in self.rates) / self.time_scale

    def qbar(self, x: np.ndarray) -> List[np.ndarray]:
        return [x[..., sl] @ q for sl, q in zip(self.slices, self.rates)]

    def observables(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        """Per-class average rates, collision probabilities and pi^R at state(s) x."""
        qb = self.qbar(x)
        if not self.heterogeneous:
            return {"qbar_H": qb[0], "gamma": -np.expm1(-qb[0])}
        gR = -np.expm1(-qb[0])
        gC = -np.expm1(-(qb[0] + qb[1]))
        pi_r, pi_c = (np.asarray(v) for v in pi_coeffs(gR, gC, self.delta))
        return {"qbar_H": qb[0], "qbar_L": qb[1], "gamma": pi_r * gR + pi_c * gC,
                "gammaC": gC, "piR": pi_r, "gammaR": gR, "piC": pi_c}

    def field_mean_field_time(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        qb = self.qbar(x)
        out = np.empty_like(x)
        if not self.heterogeneous:
            out[..., self.slices[0]] = _stencil(x[..., self.slices[0]], self.rates[0], -np.expm1(-qb[0]))
            return out
        gR = -np.expm1(-qb[0])
        gC = -np.expm1(-(qb[0] + qb[1]))
        pi_r, pi_c = (np.asarray(v) for v in pi_coeffs(gR, gC, self.delta))
        gH = pi_r * gR + pi_c * gC
        sH, sL = self.slices
        out[..., sH] = _stencil(x[..., sH], self.rates[0], gH)
        out[..., sL] = np.expand_dims(pi_c, -1) * _stencil(x[..., sL], self.rates[1], gC)
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        d = self.field_mean_field_time(x)
        if self.time_scale != 1.0:
            d /= self.time_scale
        return d

    def reduce(self, x: np.ndarray) -> np.ndarray:
        """Drop the stage-0 component of every class."""
        x = np.asarray(x, dtype=float)
        return np.concatenate([x[..., sl][..., 1:] for sl in self.slices], axis=-1)

    def expand(self, y: np.ndarray) -> np.ndarray:
        """Rebuild the full state, phi_0 = sigma - sum_{k>=1} phi_k per class."""
        y = np.asarray(y, dtype=float)
        parts, start = [], 0
        for n, sigma in zip(self.stage_counts, self.sigmas):
            tail = y[..., start:start + n - 1]
            head = sigma - tail.sum(axis=-1, keepdims=True)
            parts.extend([head, tail])
            start += n - 1
        return np.concatenate(parts, axis=-1)

    def reduced_field(self, y: np.ndarray, mean_field_time: bool = False) -> np.ndarray:
        full = self.expand(y)
        d = self.field_mean_field_time(full) if mean_field_time else self(full)
        return self.reduce(d)

    def equilibrium(self, sol: FpeSolution) -> np.ndarray:
        return np.concatenate(equilibrium_state(self.scenario, sol))

    def check_state(self, x: np.ndarray, t: float, tol: float = OCCUPANCY_TOL) -> None:
        """Raise IntegrationError if any class leaves its simplex (batch-aware)."""
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at t={t:.6g}")
        for i, (sl, sigma) in enumerate(zip(self.slices, self.sigmas)):
            part = x[..., sl]
            drift = np.abs(part.sum(axis=-1) - sigma)
            if np.any(drift > tol):
                raise IntegrationError(f"t={t:.6g}: class {self.labels[i]} sum drifted by {drift.max():.3e}")
            low = part.min()
            if low < -tol:
                k = int(np.unravel_index(np.argmin(part), part.shape)[-1])
                raise IntegrationError(f"t={t:.6g}: phi_{self.labels[i]}_{k} = {low:.3e} below tolerance")


@dataclass
class IntegrationControls:
    step: Optional[float] = None
    step_fraction: float = 0.01
    output_stride: Optional[int] = None
    max_samples: int = 100_000
    tol: float = OCCUPANCY_TOL


@dataclass
class Trajectory:
    """Sampled solution; ``states`` is (samples, dim) or (samples, batch, dim)."""

    times: np.ndarray
    states: np.ndarray
    stage_counts: Tuple[int, ...] = ()
    labels: Tuple[str, ...] = ()
    time_unit: str = "mean-field time"
    derived: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def occupancy(self, index: int = -1) -> OccupancyState:
        return OccupancyState.from_vector(self.states[index], self.stage_counts)

    def columns(self) -> List[str]:
        cols = []
        for label, n in zip(self.labels, self.stage_counts):
            cols.extend(f"phi_{label}_{k}" for k in range(n))
        return cols

    def to_frame(self) -> pd.DataFrame:
        if self.states.ndim != 2:
            raise ValueError("only single trajectories export to a table")
        df = pd.DataFrame(self.states, columns=self.columns() or None)
        df.insert(0, "t", self.times)
        for name in ("qbar_H", "qbar_L", "gamma", "gammaC", "piR"):
            if name in self.derived:
                df[name] = self.derived[name]
        return df


def _rk4_step(f: Field, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(f: Field, x0: Union[np.ndarray, OccupancyState], horizon: float,
              controls: Optional[IntegrationControls] = None, rate: float = 1.0,
              check: Optional[Callable[[np.ndarray, float], None]] = None) -> Trajectory:
    """
    Classic fixed-step RK4 from x0 over [0, horizon].

    The step is ``controls.step`` or min(step_fraction / rate, horizon / 1000),
    shrunk so the last step lands on ``horizon``. ``check(x, t)`` runs after
    every accepted step and may raise.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    controls = controls or IntegrationControls()
    x = x0.vector() if isinstance(x0, OccupancyState) else np.array(x0, dtype=float)

    h = controls.step or min(controls.step_fraction / max(rate, 1e-300), horizon / 1000.0)
    n_steps = int(math.ceil(horizon / h - 1e-9))
    h = horizon / n_steps
    stride = controls.output_stride or max(1, int(math.ceil(n_steps / max(controls.max_samples - 1, 1))))
    logger.debug("RK4: %d steps of %.4g, stride %d", n_steps, h, stride)

    times = [0.0]
    samples = [x.copy()]
    if check is not None:
        check(x, 0.0)
    for i in range(1, n_steps + 1):
        x = _rk4_step(f, x, h)
        t = i * h
        if check is not None:
            check(x, t)
        elif not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at t={t:.6g}")
        if i % stride == 0 or i == n_steps:
            times.append(t)
            samples.append(x.copy())
    return Trajectory(times=np.array(times), states=np.array(samples))


def solve_trajectory(s: Scenario, x0: Union[np.ndarray, OccupancyState, None], horizon: float,
                     controls: Optional[IntegrationControls] = None,
                     model: Optional[MeanFieldModel] = None, transient: float = 0.0,
                     transient_controls: Optional[IntegrationControls] = None) -> Trajectory:
    """
    Integrate a scenario's field from x0 (default: all mass at stage 0).

    ``x0`` may be a 2-D array of starts; they integrate as one batch.
    A positive ``transient`` covers [0, transient] with ``transient_controls``
    (by default a step fraction of 0.2) and the rest with ``controls``.
    Derived observables are attached per sample.
    """
    model = model or MeanFieldModel(s)
    controls = controls or IntegrationControls()
    if x0 is None:
        x0 = OccupancyState.all_stage_zero(model.scenario)
    x = x0.vector() if isinstance(x0, OccupancyState) else np.asarray(x0, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"initial state has {x.shape[-1]} components, model has {model.dim}")
    if not 0.0 <= transient < horizon:
        raise ValueError(f"transient {transient} must lie in [0, horizon)")

    logger.info("integrating %s over %.6g %s", model.scenario.name or "scenario", horizon,
                model.scenario.time_unit)
    if transient > 0:
        coarse = transient_controls or IntegrationControls(step_fraction=0.2, tol=controls.tol)
        head = integrate(model, x, transient, coarse, rate=model.max_rate,
                         check=lambda v, t: model.check_state(v, t, coarse.tol))
        tail = integrate(model, head.final, horizon - transient, controls, rate=model.max_rate,
                         check=lambda v, t: model.check_state(v, transient + t, controls.tol))
        traj = Trajectory(times=np.concatenate([head.times, transient + tail.times[1:]]),
                          states=np.concatenate([head.states, tail.states[1:]]))
    else:
        traj = integrate(model, x, horizon, controls, rate=model.max_rate,
                         check=lambda v, t: model.check_state(v, t, controls.tol))
    traj.stage_counts = model.stage_counts
    traj.labels = model.labels
    traj.time_unit = model.scenario.time_unit
    traj.derived = model.observables(traj.states)
    return traj


def rhs_extended(state: Union[OccupancyState, np.ndarray], s: Scenario) -> Union[Tuple[np.ndarray, ...], np.ndarray]:
    """
    Two-class AIFS field in the scenario's time unit.

    Class H follows the stage stencil with gamma^H = pi^R gamma^R + pi^C gamma^C,
    class L the stencil with gamma^C scaled by pi^C. Returns per-class
    derivatives for an OccupancyState, a stacked vector for an array.
    """
    model = MeanFieldModel(s)
    if isinstance(state, OccupancyState):
        d = model(state.vector())
        return tuple(d[sl] for sl in model.slices)
    return model(np.asarray(state, dtype=float))
