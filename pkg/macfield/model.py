"""
Domain model for mean-field backoff analysis.

Holds the scenario types (classes, population, AIFS gap, scaling mode), the
validation rules, the attempt-rate and collision-probability primitives and
the MONO / MINT / BMP condition checkers. Everything else in the package is
built on these types.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

INF = math.inf
SIGMA_TOL = 1e-9
OCCUPANCY_TOL = 1e-9
BMP_RTOL = 1e-12
CLASS_LABELS = ("H", "L")

Delta = Union[int, float]


class MacFieldError(Exception):
    """Base class for every error raised by the package."""


class ScenarioError(MacFieldError, ValueError):
    """Invalid scenario, class or scenario document. ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class SolverError(MacFieldError, RuntimeError):
    """Root enumeration or fixed-point solve failed."""


class IntegrationError(MacFieldError, RuntimeError):
    """Invariant violation or non-finite derivative during integration."""


class SimulationError(MacFieldError, RuntimeError):
    """Simulator precondition failure."""


class ScalingMode(str, Enum):
    SCALED = "scaled"
    RAW = "raw"


@dataclass(frozen=True)
class ClassParams:
    """
    One traffic class.

    ``q`` holds the K+1 per-stage rates: scaled attempt rates in scaled mode,
    per-slot probabilities p_k in raw mode (the owning scenario decides).
    """

    q: Tuple[float, ...]
    K: int
    sigma: float = 1.0
    label: str = "H"

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(float(v) for v in self.q))

    @classmethod
    def from_rates(cls, q: Sequence[float], sigma: float = 1.0, label: str = "H") -> "ClassParams":
        return cls(q=tuple(q), K=len(q) - 1, sigma=sigma, label=label)

    @property
    def rates(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float)

    @property
    def n_stages(self) -> int:
        return self.K + 1

    def scaled_by(self, factor: float) -> "ClassParams":
        return replace(self, q=tuple(v * factor for v in self.q))


@dataclass(frozen=True)
class Scenario:
    """
    One or two classes sharing a single cell.

    In scaled mode time is accelerated mean-field time and p_k = q_k / N.
    In raw mode the class vectors are per-slot probabilities and time is
    counted in backoff slots.
    """

    classes: Tuple[ClassParams, ...]
    N: int
    delta: Delta = INF
    mode: ScalingMode = ScalingMode.SCALED
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "mode", ScalingMode(self.mode))

    @property
    def is_heterogeneous(self) -> bool:
        return len(self.classes) == 2

    @property
    def time_scale(self) -> float:
        """Mean-field time units per trajectory time unit."""
        return float(self.N) if self.mode is ScalingMode.RAW else 1.0

    @property
    def time_unit(self) -> str:
        return "slots" if self.mode is ScalingMode.RAW else "mean-field time"

    @property
    def sigmas(self) -> Tuple[float, ...]:
        return tuple(c.sigma for c in self.classes)

    @property
    def stage_counts(self) -> Tuple[int, ...]:
        return tuple(c.n_stages for c in self.classes)

    def scaled_classes(self) -> Tuple[ClassParams, ...]:
        """Classes with rates in mean-field units (q = N p in raw mode)."""
        if self.mode is ScalingMode.RAW:
            return tuple(c.scaled_by(self.N) for c in self.classes)
        return self.classes

    def slot_probabilities(self, index: int) -> np.ndarray:
        c = self.classes[index]
        if self.mode is ScalingMode.RAW:
            return c.rates
        return np.clip(c.rates / self.N, 0.0, 1.0)

    def class_sizes(self) -> Tuple[int, ...]:
        """Integer node count per class."""
        return tuple(int(v) for v in largest_remainder(self.sigmas, self.N))


@dataclass(frozen=True, eq=False)
class OccupancyState:
    """Per-class stage distributions phi; each sums to its class share."""

    phi: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(np.asarray(p, dtype=float) for p in self.phi))

    @classmethod
    def all_stage_zero(cls, scenario: Scenario) -> "OccupancyState":
        phi = []
        for c in scenario.classes:
            v = np.zeros(c.n_stages)
            v[0] = c.sigma
            phi.append(v)
        return cls(tuple(phi))

    @classmethod
    def random_simplex(cls, scenario: Scenario, rng: np.random.Generator) -> "OccupancyState":
        """Uniform draw from each class simplex, scaled by the class share."""
        return cls(tuple(rng.dirichlet(np.ones(c.n_stages)) * c.sigma for c in scenario.classes))

    @classmethod
    def from_vector(cls, x: np.ndarray, stage_counts: Sequence[int]) -> "OccupancyState":
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != sum(stage_counts):
            raise ScenarioError("phi", f"expected {sum(stage_counts)} components, got {x.shape[-1]}")
        parts, start = [], 0
        for n in stage_counts:
            parts.append(x[start:start + n].copy())
            start += n
        return cls(tuple(parts))

    def vector(self) -> np.ndarray:
        return np.concatenate(self.phi)

    def check(self, sigmas: Sequence[float], tol: float = OCCUPANCY_TOL) -> None:
        if len(sigmas) != len(self.phi):
            raise ScenarioError("phi", f"{len(self.phi)} classes given, scenario has {len(sigmas)}")
        for i, (p, sigma) in enumerate(zip(self.phi, sigmas)):
            if np.any(p < -tol):
                k = int(np.argmin(p))
                raise ScenarioError(f"phi[{i}][{k}]", f"negative occupancy {p[k]:.3e}")
            if abs(p.sum() - sigma) > tol:
                raise ScenarioError(f"phi[{i}]", f"sums to {p.sum():.12f}, share is {sigma}")


@dataclass(frozen=True)
class ConditionReport:
    mono: bool
    mint: bool
    bmp: bool

    @property
    def uniq_hint(self) -> bool:
        return self.mono or self.mint

    def to_dict(self) -> Dict[str, bool]:
        return {"mono": self.mono, "mint": self.mint, "bmp": self.bmp, "uniq_hint": self.uniq_hint}


def largest_remainder(weights: Sequence[float], total: int) -> np.ndarray:
    """Round ``total * weights`` to integers summing to ``total``."""
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if s <= 0:
        raise ScenarioError("weights", "must have positive sum")
    exact = w / s * total
    base = np.floor(exact + 1e-12).astype(np.int64)
    shortfall = int(total - base.sum())
    if shortfall > 0:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:shortfall]] += 1
    return base


def _check_class(c: ClassParams, index: int, mode: ScalingMode) -> None:
    where = f"classes[{index}]"
    if not isinstance(c.K, (int, np.integer)) or c.K < 0:
        raise ScenarioError(f"{where}.K", f"must be a nonnegative integer, got {c.K!r}")
    if len(c.q) != c.K + 1:
        raise ScenarioError(f"{where}.q", f"dimension mismatch: {len(c.q)} rates for K={c.K}")
    q = c.rates
    if not np.all(np.isfinite(q)):
        raise ScenarioError(f"{where}.q", "rates must be finite")
    if np.any(q < 0):
        raise ScenarioError(f"{where}.q", f"negative rate at stage {int(np.argmin(q))}")
    if not np.any(q > 0):
        raise ScenarioError(f"{where}.q", "all rates are zero")
    if mode is ScalingMode.RAW and np.any(q > 1):
        raise ScenarioError(f"{where}.q", f"raw-mode probability above 1 at stage {int(np.argmax(q))}")
    if not 0.0 <= c.sigma <= 1.0:
        raise ScenarioError(f"{where}.sigma", f"must lie in [0, 1], got {c.sigma}")


def validate(scenario: Scenario) -> Scenario:
    """
    Check every scenario invariant and return the normalized scenario.

    One-class scenarios get ``delta = inf`` (AIFS has nothing to differentiate).
    Raises ScenarioError naming the offending field.
    """
    if len(scenario.classes) not in (1, 2):
        raise ScenarioError("classes", f"1 or 2 classes supported, got {len(scenario.classes)}")
    if isinstance(scenario.N, bool) or not isinstance(scenario.N, (int, np.integer)) or scenario.N < 1:
        raise ScenarioError("N", f"must be an integer >= 1, got {scenario.N!r}")
    for i, c in enumerate(scenario.classes):
        _check_class(c, i, scenario.mode)
    total = sum(scenario.sigmas)
    if abs(total - 1.0) > SIGMA_TOL:
        raise ScenarioError("classes.sigma", f"shares sum to {total:g}, expected 1")

    delta = scenario.delta
    if not scenario.is_heterogeneous:
        if delta != INF:
            logger.debug("one-class scenario: delta %s treated as inf", delta)
        delta = INF
    elif delta != INF:
        if (isinstance(delta, bool) or not isinstance(delta, (int, float, np.integer, np.floating))
                or math.isnan(delta) or delta < 0 or float(delta) != int(delta)):
            raise ScenarioError("delta", f"must be a nonnegative integer or inf, got {delta!r}")
        delta = int(delta)

    labels = tuple(c.label for c in scenario.classes)
    if len(set(labels)) != len(labels):
        raise ScenarioError("classes.label", f"duplicate labels {labels}")
    return replace(scenario, delta=delta)


def check_conditions(c: ClassParams) -> ConditionReport:
    """MONO, MINT and BMP for one class; rates are read as scaled q."""
    q = c.rates
    mono = bool(np.all(q[:-1] >= q[1:]))
    mint = bool(q.max() <= 1.0)
    halving = np.all(np.abs(q[1:] - q[:-1] / 2.0) <= BMP_RTOL * np.maximum(np.abs(q[:-1] / 2.0), 1e-300))
    bmp = bool(q[0] < math.log(2.0) and halving)
    return ConditionReport(mono=mono, mint=mint, bmp=bmp)


def check_scenario_conditions(scenario: Scenario) -> ConditionReport:
    """Joint conditions over all classes in mean-field units (MONO/MINT per class)."""
    reports = [check_conditions(c) for c in scenario.scaled_classes()]
    return ConditionReport(
        mono=all(r.mono for r in reports),
        mint=all(r.mint for r in reports),
        bmp=all(r.bmp for r in reports),
    )


def mean_attempt_rate(phi: np.ndarray, c: ClassParams) -> Union[float, np.ndarray]:
    """Sum_k q_k phi_k; ``phi`` may carry leading batch axes."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != c.n_stages:
        raise ScenarioError("phi", f"length {phi.shape[-1]} does not match K+1={c.n_stages}")
    out = phi @ c.rates
    return float(out) if np.ndim(out) == 0 else out


def collision_mfl(rate: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Mean-field collision probability 1 - exp(-rate)."""
    out = -np.expm1(-np.asarray(rate, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def collision_finite(phi_counts: Sequence[int], p: Sequence[float], tagged_stage: int) -> float:
    """
    Probability that some other node attempts in a slot where a tagged node
    in stage ``tagged_stage`` attempts, N_k nodes sitting in stage k.
    """
    counts = np.asarray(phi_counts, dtype=np.int64)
    p = np.asarray(p, dtype=float)
    if counts.shape != p.shape:
        raise ValueError("counts and probabilities must have the same length")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if counts[tagged_stage] == 0:
        raise ValueError(f"no node in tagged stage {tagged_stage}")
    others = counts.copy()
    others[tagged_stage] -= 1
    idle = np.prod(np.power(1.0 - p, others))
    return float(np.clip(1.0 - idle, 0.0, 1.0))


_SCENARIO_KEYS = {"classes", "delta", "N", "mode", "name"}
_CLASS_KEYS = {"q", "K", "sigma", "label"}


def _parse_class(doc: Any, index: int) -> ClassParams:
    where = f"classes[{index}]"
    if not isinstance(doc, dict):
        raise ScenarioError(where, "must be an object")
    unknown = set(doc) - _CLASS_KEYS
    if unknown:
        raise ScenarioError(f"{where}.{sorted(unknown)[0]}", "unknown key")
    for key in ("q", "K", "sigma"):
        if key not in doc:
            raise ScenarioError(f"{where}.{key}", "missing")
    q = doc["q"]
    if not isinstance(q, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in q):
        raise ScenarioError(f"{where}.q", "must be a list of numbers")
    if isinstance(doc["K"], bool) or not isinstance(doc["K"], int):
        raise ScenarioError(f"{where}.K", "must be an integer")
    if isinstance(doc["sigma"], bool) or not isinstance(doc["sigma"], (int, float)):
        raise ScenarioError(f"{where}.sigma", "must be a number")
    label = doc.get("label", CLASS_LABELS[index] if index < len(CLASS_LABELS) else str(index))
    return ClassParams(q=tuple(q), K=doc["K"], sigma=float(doc["sigma"]), label=str(label))


def scenario_from_dict(doc: Dict[str, Any]) -> Scenario:
    """Build and validate a scenario from its JSON document, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ScenarioError("<root>", "scenario document must be an object")
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise ScenarioError(sorted(unknown)[0], "unknown key")
    for key in ("classes", "N"):
        if key not in doc:
            raise ScenarioError(key, "missing")
    if not isinstance(doc["classes"], list) or not doc["classes"]:
        raise ScenarioError("classes", "must be a non-empty list")
    classes = tuple(_parse_class(c, i) for i, c in enumerate(doc["classes"]))

    delta = doc.get("delta", "inf")
    if delta == "inf":
        delta = INF
    elif isinstance(delta, bool) or not isinstance(delta, int):
        raise ScenarioError("delta", f"must be an integer or \"inf\", got {delta!r}")

    mode = doc.get("mode", ScalingMode.SCALED.value)
    try:
        mode = ScalingMode(mode)
    except ValueError:
        raise ScenarioError("mode", f"must be 'scaled' or 'raw', got {mode!r}") from None

    n = doc["N"]
    if isinstance(n, bool) or not isinstance(n, int):
        raise ScenarioError("N", "must be an integer")
    return validate(Scenario(classes=classes, N=n, delta=delta, mode=mode, name=str(doc.get("name", ""))))


def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    return {
        "name": scenario.name,
        "N": scenario.N,
        "mode": scenario.mode.value,
        "delta": "inf" if scenario.delta == INF else int(scenario.delta),
        "classes": [
            {"label": c.label, "K": c.K, "sigma": c.sigma, "q": list(c.q)} for c in scenario.classes
        ],
    }


def homogeneous(q: Sequence[float], N: int = 1, mode: ScalingMode = ScalingMode.SCALED,
                name: str = "") -> Scenario:
    """Shorthand for a validated one-class scenario."""
    return validate(Scenario(classes=(ClassParams.from_rates(q),), N=N, mode=mode, name=name))


def two_class(qH: Sequence[float], qL: Sequence[float], sigma_h: float = 0.5, delta: Delta = 0,
              N: int = 1, mode: ScalingMode = ScalingMode.SCALED, name: str = "") -> Scenario:
    """Shorthand for a validated H/L scenario."""
    classes = (
        ClassParams.from_rates(qH, sigma=sigma_h, label="H"),
        ClassParams.from_rates(qL, sigma=1.0 - sigma_h, label="L"),
    )
    return validate(Scenario(classes=classes, N=N, delta=delta, mode=mode, name=name))
