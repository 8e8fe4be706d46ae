"""
Achievable throughput in the mean-field regime and its optimization.

omega(qbar) for abstract success / collision / overhead durations, the
throughput-optimal average attempt rate, and the geometric rate vector
q_k = q0 / m^k that puts the stationary point exactly on that optimum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np
from scipy import optimize

from .model import ClassParams, ScenarioError, check_conditions

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
M_BRACKET = (1e-6, 1e6)


@dataclass(frozen=True)
class ThroughputParams:
    """Durations in slots: success L, collision L_c, per-success overhead L_o."""

    L: float
    L_c: float = 1.0
    L_o: float = 0.0

    def __post_init__(self):
        if not self.L > 0:
            raise ScenarioError("L", f"must be positive, got {self.L}")
        if not self.L_c >= 1:
            raise ScenarioError("L_c", f"must be >= 1, got {self.L_c}")
        if not self.L_o >= 0:
            raise ScenarioError("L_o", f"must be nonnegative, got {self.L_o}")


def collision_probabilities(qbar: ArrayLike) -> Tuple[ArrayLike, ArrayLike, ArrayLike]:
    """(P_1, P_0, P_c): exactly one, zero, and two or more attempts in a slot."""
    q = np.asarray(qbar, dtype=float)
    p0 = np.exp(-q)
    p1 = q * p0
    pc = -np.expm1(-q) - p1
    if np.ndim(q) == 0:
        return float(p1), float(p0), float(pc)
    return p1, p0, pc


def omega(qbar: ArrayLike, p: ThroughputParams) -> ArrayLike:
    """Fraction of time carrying payload, P1 L / (P1 (L + L_o) + P0 + Pc L_c)."""
    p1, p0, pc = (np.asarray(v) for v in collision_probabilities(qbar))
    out = p1 * p.L / (p1 * (p.L + p.L_o) + p0 + pc * p.L_c)
    out = np.where(np.isfinite(out), out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def optimal_qbar(L_c: float) -> float:
    """Root of (q - 1) e^q = 1/L_c - 1 (bisection, then Newton)."""
    if not L_c > 0:
        raise ValueError(f"L_c must be positive, got {L_c}")
    target = 1.0 / L_c - 1.0
    g = lambda q: (q - 1.0) * math.exp(q) - target
    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
    if g(hi) == 0.0:
        return hi
    q = optimize.bisect(g, 0.0, hi, xtol=1e-13)
    for _ in range(5):
        slope = q * math.exp(q)
        if slope == 0:
            break
        nxt = q - g(q) / slope
        if abs(g(nxt)) >= abs(g(q)):
            break
        q = nxt
    return q


def _ratio(m: float, gamma: float, K: int) -> float:
    k = np.arange(K + 1)
    w = gamma ** k
    return float(w.sum() / np.sum(w * m ** k))


def fit_multiplier(q0: float, qstar: float, K: int) -> float:
    """
    m* with qstar / q0 = sum gamma*^k / sum gamma*^k m^k, gamma* = 1 - e^{-qstar}.

    The right side falls strictly in m, so the root is bracketed on a
    logarithmic scan of [1e-6, 1e6] and refined by bisection in log m.
    """
    if not qstar <= q0 <= 1.0 + 1e-15:
        raise ValueError(f"q0={q0} outside [{qstar}, 1]")
    target = qstar / q0
    if target == 1.0:
        return 1.0
    if K == 0:
        raise ValueError("a single-stage class can only reach qstar with q0 = qstar")
    gamma = -math.expm1(-qstar)
    h = lambda u: _ratio(math.exp(u), gamma, K) - target

    lo, hi = (math.log(v) for v in M_BRACKET)
    points = np.linspace(lo, hi, 121)
    values = np.array([h(u) for u in points])
    sign_change = np.flatnonzero(values[:-1] * values[1:] <= 0)
    if not sign_change.size:
        raise ValueError(f"no multiplier in {M_BRACKET} reaches ratio {target}")
    i = int(sign_change[0])
    u = optimize.bisect(h, points[i], points[i + 1], xtol=1e-15)
    return math.exp(u)


def optimal_design(L: float, L_c: float = 1.0, L_o: float = 0.0, K: int = 6,
                   q0: float = 1.0) -> Dict[str, object]:
    """qstar, the multiplier for ``q0`` and the resulting rate vector with its conditions."""
    params = ThroughputParams(L=L, L_c=L_c, L_o=L_o)
    qstar = optimal_qbar(L_c)
    mstar = fit_multiplier(q0, qstar, K)
    q_vector = [q0 / mstar ** k for k in range(K + 1)]
    conditions = check_conditions(ClassParams.from_rates(q_vector))
    logger.info("optimal qbar %.6f, multiplier %.6f for K=%d", qstar, mstar, K)
    return {
        "qstar": qstar,
        "mstar": mstar,
        "q0": q0,
        "q_vector": q_vector,
        "omega_at_qstar": omega(qstar, params),
        "conditions": conditions.to_dict(),
    }
