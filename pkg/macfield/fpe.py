"""
Fixed-point equations of the stationary regime.

Residuals for the homogeneous system (mean-field and finite-N forms), the
AIFS-extended two-class system and the pooled single-gamma form, a bracketing
root enumerator, equilibrium occupancy reconstruction and the slot-type
coefficients pi^R / pi^C.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize

from .model import INF, ClassParams, Delta, Scenario, SolverError, validate

logger = logging.getLogger(__name__)

GRID_POINTS = 20000
GAMMA_MAX = 1.0 - 1e-9
XTOL = 1e-12
DEDUPE_TOL = 1e-6
TANGENT_TOL = 1e-7
GAMMA_C_FLOOR = 1e-14

ArrayLike = Union[float, np.ndarray]


def _out(x: np.ndarray) -> ArrayLike:
    return float(x) if np.ndim(x) == 0 else x


def attempt_rate_at(gamma: ArrayLike, c: ClassParams) -> ArrayLike:
    """
    Q(gamma) = sum gamma^k / sum (gamma^k / q_k).

    A zero rate makes its term infinite whenever gamma^k > 0, which drives Q
    to zero; terms with gamma^k = 0 contribute nothing.
    """
    g = np.asarray(gamma, dtype=float)
    powers = g[..., None] ** np.arange(c.n_stages)
    q = c.rates
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(q > 0, 1.0 / np.where(q > 0, q, 1.0), np.inf)
        terms = np.where(powers > 0, powers * inv, 0.0)
        out = powers.sum(axis=-1) / terms.sum(axis=-1)
    return _out(out)


def homogeneous_residual(gamma: ArrayLike, c: ClassParams, N: Optional[int] = None) -> ArrayLike:
    """
    1 - exp(-Q(gamma)) - gamma.

    With ``N`` given the class vector is read as per-slot probabilities p and
    the exponent is N * B(gamma), B being Q evaluated on p.
    """
    rate = attempt_rate_at(gamma, c)
    if N is not None:
        rate = N * np.asarray(rate)
    return _out(-np.expm1(-np.asarray(rate)) - np.asarray(gamma, dtype=float))


def bianchi_residual(gamma: ArrayLike, c: ClassParams, N: int) -> ArrayLike:
    """Exact finite-N form 1 - (1 - B(gamma))^(N-1) - gamma, ``c.q`` holding p."""
    b = np.clip(np.asarray(attempt_rate_at(gamma, c)), 0.0, 1.0)
    return _out(1.0 - (1.0 - b) ** (N - 1) - np.asarray(gamma, dtype=float))


def homogeneous_rate_residual(qbar: ArrayLike, c: ClassParams) -> ArrayLike:
    """sigma * Q(1 - exp(-qbar)) - qbar, the same equation written in qbar."""
    q = np.asarray(qbar, dtype=float)
    return _out(c.sigma * np.asarray(attempt_rate_at(-np.expm1(-q), c)) - q)


def pooled_residual(gamma: ArrayLike, classes: Sequence[ClassParams]) -> ArrayLike:
    """
    Single-gamma residual shared by all classes, 1 - prod exp(-sigma_X Q_X) - gamma.

    Only meaningful when every class sees the same collision probability,
    i.e. a two-class scenario with delta = 0.
    """
    g = np.asarray(gamma, dtype=float)
    total = sum(c.sigma * np.asarray(attempt_rate_at(g, c)) for c in classes)
    return _out(-np.expm1(-total) - g)


def _polish(f: Callable[[float], float], x: float, a: float, b: float, h: float = 1e-7) -> float:
    fx = f(x)
    lo, hi = max(a, x - h), min(b, x + h)
    if hi <= lo:
        return x
    slope = (f(hi) - f(lo)) / (hi - lo)
    if slope == 0 or not np.isfinite(slope):
        return x
    x1 = x - fx / slope
    if a <= x1 <= b and abs(f(x1)) < abs(fx):
        return x1
    return x


def _evaluate_grid(residual: Callable, grid: np.ndarray) -> np.ndarray:
    try:
        values = np.asarray(residual(grid), dtype=float)
        if values.shape == grid.shape:
            return values
    except (TypeError, ValueError):
        pass
    return np.array([float(residual(x)) for x in grid])


def enumerate_roots(residual: Callable[[ArrayLike], ArrayLike], lo: float = 0.0,
                    hi: float = GAMMA_MAX, M: int = GRID_POINTS, xtol: float = XTOL,
                    dedupe_tol: float = DEDUPE_TOL) -> List[float]:
    """
    All transversal roots of ``residual`` on [lo, hi].

    Scans a uniform grid of M points, brackets each sign change, refines it by
    bisection and applies one finite-difference Newton step. Near-zero minima
    without a sign change are logged as warnings, never returned.
    """
    grid = np.linspace(lo, hi, M)
    values = _evaluate_grid(residual, grid)
    f = lambda x: float(residual(x))

    roots = []
    finite = np.isfinite(values)
    for i in np.flatnonzero(finite & (values == 0.0)):
        roots.append(float(grid[i]))

    s = np.sign(values)
    crossings = np.flatnonzero(finite[:-1] & finite[1:] & (s[:-1] * s[1:] < 0))
    for i in crossings:
        a, b = float(grid[i]), float(grid[i + 1])
        try:
            x = optimize.bisect(f, a, b, xtol=xtol)
        except ValueError:
            # scalar and vectorized evaluation disagree in the last bit at an endpoint
            x = a if abs(f(a)) <= abs(f(b)) else b
        roots.append(_polish(f, x, a, b))

    mag = np.abs(values)
    mid = slice(1, M - 1)
    tangent = (finite[mid] & (mag[mid] < TANGENT_TOL) & (mag[mid] <= mag[:-2]) & (mag[mid] <= mag[2:])
               & (s[:-2] == s[mid]) & (s[mid] == s[2:]) & (s[mid] != 0))
    for i in np.flatnonzero(tangent) + 1:
        logger.warning("tangential near-root at %.6f (|f| = %.2e), not reported as a root",
                       grid[i], mag[i])

    roots.sort()
    unique = []
    for r in roots:
        if not unique or r - unique[-1] > dedupe_tol:
            unique.append(r)
    if not unique:
        logger.warning("no sign change of the residual on [%g, %g]", lo, hi)
    return unique


def equilibrium_occupancy(gamma: float, c: ClassParams) -> np.ndarray:
    """Stationary stage distribution phi_k proportional to gamma^k / q_k, summing to sigma."""
    q = c.rates
    if np.any(q <= 0):
        raise SolverError(f"class {c.label}: equilibrium occupancy needs every q_k > 0")
    w = gamma ** np.arange(c.n_stages) / q
    return c.sigma * w / w.sum()


def pi_coeffs(gammaR: ArrayLike, gammaC: ArrayLike, delta: Delta) -> Tuple[ArrayLike, ArrayLike]:
    """
    Stationary shares of reserved (R) and common (C) slots.

    S = sum_{i<delta} (1 - gammaR)^i and T = (1 - gammaR)^delta / gammaC;
    pi^C = T / (S + T) and pi^R = 1 - pi^C.
    """
    gR = np.asarray(gammaR, dtype=float)
    gC = np.asarray(gammaC, dtype=float)
    shape = np.broadcast(gR, gC).shape
    if delta == INF:
        pi_c = np.zeros(shape)
    elif delta == 0:
        pi_c = np.ones(shape)
    else:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            log_idle = np.log1p(-gR)
            a = np.exp(delta * log_idle)
            S = np.where(gR > 0, -np.expm1(delta * log_idle) / gR, float(delta))
            T = a / gC
            pi_c = np.where(gC <= GAMMA_C_FLOOR, np.where(a > 0, 1.0, 0.0), T / (S + T))
        pi_c = np.broadcast_to(pi_c, shape).astype(float)
    pi_r = 1.0 - pi_c
    return _out(pi_r), _out(pi_c)


def slot_gammas(qH: ArrayLike, qL: ArrayLike, delta: Delta) -> Dict[str, ArrayLike]:
    """gamma^R, gamma^C, pi^R, pi^C and gamma^H at per-class average rates (qH, qL)."""
    qH = np.asarray(qH, dtype=float)
    qL = np.asarray(qL, dtype=float)
    gR = -np.expm1(-qH)
    gC = -np.expm1(-(qH + qL))
    pi_r, pi_c = pi_coeffs(gR, gC, delta)
    gH = np.asarray(pi_r) * gR + np.asarray(pi_c) * gC
    return {"gamma_r": _out(gR), "gamma_c": _out(gC), "pi_r": pi_r, "pi_c": pi_c, "gamma_h": _out(gH)}


def gamma_h_compact(qH: ArrayLike, qL: ArrayLike, delta: Delta) -> ArrayLike:
    """
    gamma^H = 1 - (e^{-qH} h + e^{-qH-qL}) / (h + 1) with
    h = (e^{qH delta} - 1)(1 - e^{-qH-qL}) / (1 - e^{-qH}).

    At qH = 0 the ratio (e^{qH delta} - 1)/(1 - e^{-qH}) is replaced by its
    limit delta; an infinite h (delta = inf or overflow) gives 1 - e^{-qH}.
    """
    qH = np.asarray(qH, dtype=float)
    qL = np.asarray(qL, dtype=float)
    qH, qL = np.broadcast_arrays(qH, qL)
    gC = -np.expm1(-(qH + qL))
    gR = -np.expm1(-qH)
    if delta == INF:
        return _out(gR.copy())
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(qH > 0, np.expm1(qH * delta) / np.where(qH > 0, gR, 1.0), float(delta))
        h = ratio * gC
        finite = np.isfinite(h)
        hf = np.where(finite, h, 0.0)
        out = 1.0 - (np.exp(-qH) * hf + np.exp(-(qH + qL))) / (hf + 1.0)
    return _out(np.where(finite, out, gR))


@dataclass(frozen=True)
class FpeSolution:
    """
    One solution of the stationary equations.

    ``gamma`` is the homogeneous gamma, or gamma^C in a two-class scenario.
    """

    gamma: float
    qbar: Tuple[float, ...]
    residual_norm: float
    index: int
    gamma_h: Optional[float] = None
    gamma_r: Optional[float] = None
    gamma_c: Optional[float] = None
    pi_r: Optional[float] = None
    pi_c: Optional[float] = None

    @property
    def class_gammas(self) -> Tuple[float, ...]:
        """Collision probability each class sees at this solution."""
        if self.gamma_h is None:
            return (self.gamma,)
        return (self.gamma_h, self.gamma_c)

    def to_dict(self) -> Dict[str, object]:
        d = {"index": self.index, "gamma": self.gamma, "qbar": list(self.qbar),
             "residual_norm": self.residual_norm}
        if self.gamma_h is not None:
            d.update(gamma_h=self.gamma_h, gamma_r=self.gamma_r, gamma_c=self.gamma_c,
                     pi_r=self.pi_r, pi_c=self.pi_c)
        return d


def solve_homogeneous(s: Scenario, M: int = GRID_POINTS) -> List[FpeSolution]:
    (c,) = s.scaled_classes()
    roots = enumerate_roots(lambda g: homogeneous_residual(g, c), M=M)
    if not roots:
        raise SolverError(f"{s.name or 'scenario'}: no root of the homogeneous fixed point equation")
    out = []
    for i, g in enumerate(roots):
        qbar = c.sigma * attempt_rate_at(g, c)
        out.append(FpeSolution(gamma=g, qbar=(qbar,), residual_norm=abs(homogeneous_residual(g, c)), index=i))
    return out


def extended_residual(qH: ArrayLike, qL: ArrayLike, s: Scenario) -> Tuple[ArrayLike, ArrayLike]:
    """Residuals of the two per-class rate equations at (qH, qL)."""
    cH, cL = s.scaled_classes()
    g = slot_gammas(qH, qL, s.delta)
    rH = cH.sigma * np.asarray(attempt_rate_at(g["gamma_h"], cH)) - np.asarray(qH, dtype=float)
    rL = cL.sigma * np.asarray(attempt_rate_at(g["gamma_c"], cL)) - np.asarray(qL, dtype=float)
    return _out(rH), _out(rL)


def _solution_at(qH: float, qL: float, s: Scenario, index: int) -> FpeSolution:
    g = slot_gammas(qH, qL, s.delta)
    rH, rL = extended_residual(qH, qL, s)
    return FpeSolution(
        gamma=g["gamma_c"], qbar=(qH, qL), residual_norm=float(max(abs(rH), abs(rL))), index=index,
        gamma_h=g["gamma_h"], gamma_r=g["gamma_r"], gamma_c=g["gamma_c"],
        pi_r=float(g["pi_r"]), pi_c=float(g["pi_c"]),
    )


def _reduced_split(total: ArrayLike, s: Scenario) -> Tuple[np.ndarray, np.ndarray]:
    """Split a total rate qH + qL into (qH, qL) using the class-L equation."""
    _, cL = s.scaled_classes()
    total = np.asarray(total, dtype=float)
    qL = cL.sigma * np.asarray(attempt_rate_at(-np.expm1(-total), cL))
    return total - qL, qL


def reduced_residual(total: ArrayLike, s: Scenario) -> ArrayLike:
    """
    Class-H residual along the curve where the class-L equation holds.

    Parametrized by the total rate T = qH + qL (gamma^C = 1 - e^{-T}); qH is
    clamped at 0 inside gamma^H so the function stays continuous and positive
    wherever the split would make qH negative.
    """
    cH, _ = s.scaled_classes()
    qH, qL = _reduced_split(total, s)
    gH = slot_gammas(np.maximum(qH, 0.0), qL, s.delta)["gamma_h"]
    return _out(cH.sigma * np.asarray(attempt_rate_at(gH, cH)) - qH)


def _rate_box(s: Scenario) -> Tuple[float, float]:
    cH, cL = s.scaled_classes()
    return cH.sigma * float(cH.rates.max()), cL.sigma * float(cL.rates.max())


def _dedupe(solutions: List[Tuple[float, float]], tol: float) -> List[Tuple[float, float]]:
    unique = []
    for qH, qL in sorted(solutions, key=lambda v: v[0] + v[1]):
        if all(abs(qH - u[0]) > tol or abs(qL - u[1]) > tol for u in unique):
            unique.append((qH, qL))
    return unique


def _newton2(s: Scenario, x: np.ndarray, iters: int = 50, tol: float = 1e-13) -> Optional[np.ndarray]:
    for _ in range(iters):
        r = np.array(extended_residual(x[0], x[1], s))
        if np.max(np.abs(r)) < tol:
            return x
        J = np.empty((2, 2))
        for j in range(2):
            h = 1e-7 * max(1.0, abs(x[j]))
            e = np.zeros(2)
            e[j] = h
            J[:, j] = (np.array(extended_residual(*(x + e), s)) - np.array(extended_residual(*(x - e), s))) / (2 * h)
        try:
            step = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            return None
        x = np.maximum(x - step, 0.0)
    r = np.array(extended_residual(x[0], x[1], s))
    return x if np.max(np.abs(r)) < 1e-9 else None


def _solve_grid(s: Scenario, n: int, damping: float = 0.5, max_iter: int = 500,
                tol: float = 1e-12) -> List[Tuple[float, float]]:
    """2-D sign-structure scan plus damped fixed-point iteration from every grid node."""
    bH, bL = _rate_box(s)
    hs = np.linspace(0.0, bH, n)
    ls = np.linspace(0.0, bL, n)
    QH, QL = np.meshgrid(hs, ls, indexing="ij")
    rH, rL = (np.asarray(v) for v in extended_residual(QH, QL, s))

    found = []

    def spans(r):
        corners = np.stack([r[:-1, :-1], r[1:, :-1], r[:-1, 1:], r[1:, 1:]])
        return (corners.min(axis=0) <= 0) & (corners.max(axis=0) >= 0)

    candidates = np.argwhere(spans(rH) & spans(rL))
    for i, j in candidates:
        x0 = np.array([(hs[i] + hs[i + 1]) / 2, (ls[j] + ls[j + 1]) / 2])
        x = _newton2(s, x0)
        if x is not None:
            found.append((float(x[0]), float(x[1])))

    x = np.stack([QH.ravel(), QL.ravel()])
    active = np.ones(x.shape[1], dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        rh, rl = extended_residual(x[0, active], x[1, active], s)
        step = np.stack([np.asarray(rh), np.asarray(rl)])
        x[:, active] += damping * step
        done = np.max(np.abs(step), axis=0) < tol
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    converged = ~active
    for qH, qL in _dedupe([tuple(v) for v in x[:, converged].T], DEDUPE_TOL):
        polished = _newton2(s, np.array([qH, qL]))
        if polished is not None:
            found.append((float(polished[0]), float(polished[1])))
    return found


def solve_extended(s: Scenario, method: str = "reduced", M: int = GRID_POINTS,
                   grid: int = 200) -> List[FpeSolution]:
    """
    Every solution of the two-class stationary equations.

    ``method="reduced"`` scans the class-H residual along the curve solving the
    class-L equation (one variable, exact bracketing); ``method="grid"`` runs the
    2-D sign-structure scan with damped fixed-point iteration over the box
    [0, sigma^H max q^H] x [0, sigma^L max q^L].
    """
    if not s.is_heterogeneous:
        raise ValueError("solve_extended needs a two-class scenario")
    if method == "reduced":
        bH, bL = _rate_box(s)
        totals = enumerate_roots(lambda t: reduced_residual(t, s), lo=0.0, hi=bH + bL + 1.0, M=M)
        pairs = []
        for t in totals:
            qH, qL = _reduced_split(t, s)
            pairs.append((float(qH), float(qL)))
    elif method == "grid":
        pairs = _solve_grid(s, grid)
    else:
        raise ValueError(f"unknown method {method!r}")

    pairs = _dedupe(pairs, DEDUPE_TOL)
    if not pairs:
        raise SolverError(f"{s.name or 'scenario'}: no solution of the extended fixed point equations")
    solutions = sorted((_solution_at(qH, qL, s, 0) for qH, qL in pairs), key=lambda v: v.gamma)
    out = []
    for sol in solutions:
        if out and abs(sol.gamma - out[-1].gamma) <= DEDUPE_TOL and abs(sol.gamma_h - out[-1].gamma_h) <= DEDUPE_TOL:
            continue
        out.append(replace(sol, index=len(out)))
    logger.info("%s: %d extended solution(s) via %s", s.name or "scenario", len(out), method)
    return out


def solve(s: Scenario, M: int = GRID_POINTS, method: str = "reduced", grid: int = 200) -> List[FpeSolution]:
    """All stationary solutions of a scenario (homogeneous or two-class)."""
    s = validate(s)
    if s.is_heterogeneous:
        return solve_extended(s, method=method, M=M, grid=grid)
    return solve_homogeneous(s, M=M)


def equilibrium_state(s: Scenario, sol: FpeSolution) -> Tuple[np.ndarray, ...]:
    """Per-class occupancy at a solution (class H with gamma^H, class L with gamma^C)."""
    return tuple(equilibrium_occupancy(g, c) for g, c in zip(sol.class_gammas, s.scaled_classes()))


def residual_curve(s: Scenario, M: int = 2000) -> pd.DataFrame:
    """
    Residual table for plotting.

    One class: (gamma, f_gamma) of the mean-field residual. Two classes with
    delta = 0: the pooled single-gamma residual. Otherwise the reduced class-H
    residual against gamma^C.
    """
    gamma = np.linspace(0.0, GAMMA_MAX, M)
    if not s.is_heterogeneous:
        (c,) = s.scaled_classes()
        f = homogeneous_residual(gamma, c)
    elif s.delta == 0:
        f = pooled_residual(gamma, s.scaled_classes())
    else:
        f = reduced_residual(-np.log1p(-gamma), s)
    return pd.DataFrame({"gamma": gamma, "f_gamma": f})
