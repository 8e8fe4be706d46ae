"""
Stability analysis of mean-field equilibria.

Jacobian classification on the reduced (stage-0 eliminated) field, peak-based
limit-cycle detection, basin-of-attraction probing, and an empirical probe of
global stability for MINT configurations.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import find_peaks

from .fpe import FpeSolution, solve
from .model import MacFieldError, OccupancyState, Scenario, SolverError, check_scenario_conditions
from .ode import IntegrationControls, MeanFieldModel, Trajectory, solve_trajectory

logger = logging.getLogger(__name__)

EIG_TOL = 1e-8
FD_REL_STEP = 1e-6
PERIOD_TOL = 0.02
AMPLITUDE_TOL = 0.05
BASIN_TOL = 1e-4
NON_CONVERGENT = "non-convergent"


class TrajectoryTooShort(MacFieldError, ValueError):
    pass


class Stability(str, Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    MARGINAL = "marginal"


def classify(eigenvalues: Sequence[complex], tol: float = EIG_TOL) -> Stability:
    re = np.real(np.asarray(eigenvalues))
    if re.size and np.all(re < -tol):
        return Stability.STABLE
    if np.any(re > tol):
        return Stability.UNSTABLE
    return Stability.MARGINAL


def jacobian_fd(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                rel_step: float = FD_REL_STEP) -> np.ndarray:
    """Central-difference Jacobian, step rel_step * max(1, |x_j|) per coordinate."""
    x = np.asarray(x, dtype=float)
    n = x.size
    J = np.empty((np.asarray(f(x)).size, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = h
        J[:, j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h)
    if not np.all(np.isfinite(J)):
        raise SolverError("non-finite Jacobian entry")
    return J


@dataclass
class EquilibriumReport:
    gamma: float
    occupancy: OccupancyState
    eigenvalues: np.ndarray
    classification: Stability
    solution: FpeSolution
    field_norm: float = 0.0
    time_unit: str = "mean-field time"
    labels: Tuple[str, ...] = ()

    def _labels(self) -> Tuple[str, ...]:
        return self.labels or tuple(f"class{i}" for i in range(len(self.occupancy.phi)))

    def to_dict(self) -> Dict[str, object]:
        return {
            "gamma": self.gamma,
            "qbar": list(self.solution.qbar),
            "classification": self.classification.value,
            "eigenvalues": [[float(v.real), float(v.imag)] for v in self.eigenvalues],
            "eigenvalue_unit": f"per {self.time_unit}",
            "occupancy": {label: [float(v) for v in phi] for label, phi in zip(self._labels(), self.occupancy.phi)},
            "field_norm": self.field_norm,
            "solution": self.solution.to_dict(),
        }


def classify_equilibria(s: Scenario, rel_step: float = FD_REL_STEP, tol: float = EIG_TOL,
                        solutions: Optional[List[FpeSolution]] = None) -> List[EquilibriumReport]:
    """
    Classify every stationary solution by the eigenvalues of the reduced Jacobian.

    Eigenvalue signs are decided in mean-field time; reported values are in
    the scenario's own time unit.
    """
    model = MeanFieldModel(s)
    solutions = solutions if solutions is not None else solve(model.scenario)
    reduced = lambda y: model.reduced_field(y, mean_field_time=True)
    reports = []
    for sol in solutions:
        x = model.equilibrium(sol)
        y = model.reduce(x)
        norm = float(np.max(np.abs(reduced(y))))
        if norm > 1e-8:
            logger.warning("field norm %.2e at equilibrium gamma=%.6f", norm, sol.gamma)
        eig = np.linalg.eigvals(jacobian_fd(reduced, y, rel_step))
        kind = classify(eig, tol)
        reports.append(EquilibriumReport(
            gamma=sol.gamma, occupancy=OccupancyState.from_vector(x, model.stage_counts),
            eigenvalues=eig / model.time_scale, classification=kind, solution=sol,
            field_norm=norm, time_unit=model.scenario.time_unit, labels=model.labels,
        ))
        logger.info("equilibrium gamma=%.4f: %s (max Re = %.3e)", sol.gamma, kind.value,
                    float(np.max(eig.real)) if eig.size else 0.0)
    return reports


@dataclass
class CycleReport:
    periodic: bool
    period: float
    amplitude: float
    confidence: int
    gaps: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, object]:
        return {"periodic": self.periodic, "period": self.period, "amplitude": self.amplitude,
                "confidence": self.confidence,
                "gaps": [] if self.gaps is None else [float(g) for g in self.gaps]}


def _refine_peaks(t: np.ndarray, y: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Parabolic interpolation of the peak time through each maximum and its neighbours."""
    out = t[idx].astype(float)
    inner = (idx > 0) & (idx < len(y) - 1)
    i = idx[inner]
    denom = y[i - 1] - 2.0 * y[i] + y[i + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(denom != 0, 0.5 * (y[i - 1] - y[i + 1]) / denom, 0.0)
    dt = 0.5 * (t[i + 1] - t[i - 1])
    out[inner] = t[i] + np.clip(offset, -0.5, 0.5) * dt
    return out


def detect_limit_cycle(traj: Trajectory, burn_in_fraction: float = 0.5, series: str = "qbar_H",
                       max_cycles: int = 10, min_cycles: int = 5) -> CycleReport:
    """
    Decide whether a trajectory has settled on a periodic orbit.

    Looks at the scalar ``series`` after the burn-in, takes maxima above the
    mid-range, and reports periodic when at least ``min_cycles`` of the last
    ``max_cycles`` inter-peak gaps agree within 2% and the peak-to-trough
    amplitudes agree within 5%.
    """
    if series not in traj.derived:
        raise KeyError(f"trajectory has no {series!r} series")
    t = np.asarray(traj.times, dtype=float)
    y = np.asarray(traj.derived[series], dtype=float)
    if y.ndim != 1:
        raise ValueError("cycle detection works on a single trajectory")
    t_start = t[0] + burn_in_fraction * (t[-1] - t[0])
    keep = t >= t_start
    t, y = t[keep], y[keep]
    if len(y) < 16:
        raise TrajectoryTooShort(f"{len(y)} samples after burn-in")

    span = float(y.max() - y.min())
    if span <= 1e-9 * max(1.0, float(np.abs(y).max())):
        return CycleReport(periodic=False, period=float("nan"), amplitude=span, confidence=0)

    peaks, _ = find_peaks(y, height=0.5 * (y.min() + y.max()))
    if len(peaks) < 2:
        return CycleReport(periodic=False, period=float("nan"), amplitude=span, confidence=0)

    peaks = peaks[-(max_cycles + 1):]
    times = _refine_peaks(t, y, peaks)
    gaps = np.diff(times)
    troughs = np.array([y[a:b + 1].min() for a, b in zip(peaks[:-1], peaks[1:])])
    amps = y[peaks[1:]] - troughs

    median = float(np.median(gaps))
    confidence = int(np.sum(np.abs(gaps - median) <= PERIOD_TOL * median))
    period = float(gaps.mean())
    amplitude = float(amps.mean())
    gaps_ok = len(gaps) >= min_cycles and (gaps.max() - gaps.min()) <= PERIOD_TOL * period
    amps_ok = amplitude > 1e-9 and (amps.max() - amps.min()) <= AMPLITUDE_TOL * amplitude
    periodic = bool(gaps_ok and amps_ok)
    logger.info("cycle check: %d gaps, period %.6g, amplitude %.4g -> %s", len(gaps), period,
                amplitude, "periodic" if periodic else "not periodic")
    return CycleReport(periodic=periodic, period=period if periodic else float("nan"),
                       amplitude=amplitude, confidence=confidence, gaps=gaps)


def _stack_points(points: Sequence[Union[OccupancyState, np.ndarray]]) -> np.ndarray:
    return np.stack([p.vector() if isinstance(p, OccupancyState) else np.asarray(p, dtype=float)
                     for p in points])


def basin_map(s: Scenario, initial_points: Sequence[Union[OccupancyState, np.ndarray]], horizon: float,
              reports: Optional[List[EquilibriumReport]] = None,
              controls: Optional[IntegrationControls] = None, tol: float = BASIN_TOL) -> List[str]:
    """
    Label each start with the stable equilibrium it reaches, or ``non-convergent``.

    All starts integrate as one batch; labels come back in input order and
    are the equilibrium gamma formatted to four decimals.
    """
    model = MeanFieldModel(s)
    reports = reports if reports is not None else classify_equilibria(model.scenario)
    stable = [r for r in reports if r.classification is Stability.STABLE]
    x0 = _stack_points(initial_points)
    base = controls or IntegrationControls()
    batch_controls = IntegrationControls(step=base.step, step_fraction=base.step_fraction,
                                         max_samples=3, tol=base.tol)
    traj = solve_trajectory(model.scenario, x0, horizon, batch_controls, model=model)
    final = np.stack(model.qbar(traj.final), axis=-1)

    labels = []
    for row in final:
        label = NON_CONVERGENT
        for r in stable:
            if np.all(np.abs(row - np.asarray(r.solution.qbar)) <= tol):
                label = f"{r.gamma:.4f}"
                break
        labels.append(label)
    logger.info("basin map: %s", dict(Counter(labels)))
    return labels


def probe_global_stability(s: Scenario, n_starts: int = 20, horizon: Optional[float] = None,
                           seed: int = 0, tol: float = 1e-6,
                           controls: Optional[IntegrationControls] = None,
                           chunks: int = 20) -> Dict[str, object]:
    """
    Integrate random simplex starts and check they all reach the equilibrium.

    The horizon is covered in ``chunks`` equal pieces; with a unique
    equilibrium the integration stops after the first piece at whose end
    every start is within ``tol`` of it. ``settled_at`` is that time, or the
    full horizon.

    For a MINT two-class scenario global stability is conjectured, not proved;
    a non-convergent start is logged as a finding.
    """
    model = MeanFieldModel(s)
    sc = model.scenario
    solutions = solve(sc)
    conditions = check_scenario_conditions(sc)
    if horizon is None:
        slowest = min(float(q[q > 0].min()) for q in model.rates)
        horizon = 200.0 / slowest * model.time_scale
    rng = np.random.default_rng(seed)
    x = np.stack([OccupancyState.random_simplex(sc, rng).vector() for _ in range(n_starts)])
    batch_controls = IntegrationControls(step_fraction=(controls or IntegrationControls()).step_fraction,
                                         max_samples=3)
    target = np.asarray(solutions[0].qbar) if len(solutions) == 1 else None
    piece = horizon / max(int(chunks), 1)

    gaps = np.full(n_starts, np.inf)
    elapsed = 0.0
    while elapsed < horizon * (1.0 - 1e-12):
        step = min(piece, horizon - elapsed)
        x = solve_trajectory(sc, x, step, batch_controls, model=model).final
        elapsed += step
        if target is not None:
            gaps = np.max(np.abs(np.stack(model.qbar(x), axis=-1) - target), axis=-1)
            if np.all(gaps <= tol):
                break
    converged = int(np.sum(gaps <= tol))
    if converged < n_starts and conditions.mint and sc.is_heterogeneous:
        logger.warning("finding: %d of %d starts did not converge for MINT scenario %s",
                       n_starts - converged, n_starts, sc.name or "<unnamed>")
    return {
        "solutions": len(solutions),
        "mint": conditions.mint,
        "mono": conditions.mono,
        "converged": converged,
        "total": n_starts,
        "max_gap": float(np.max(gaps)),
        "horizon": horizon,
        "settled_at": elapsed,
    }
