"""
Built-in reproduction scenarios.

Both examples are stored as scenario documents (the same JSON schema the CLI
reads) together with the reference numbers the reproduction run is checked
against.
"""

from __future__ import annotations

from typing import Any, Dict

from .model import Scenario, ScenarioError, scenario_from_dict

EXAMPLE1_M = 1.2
EXAMPLE2_M = 0.8


def _example1_doc() -> Dict[str, Any]:
    # p_0 = 1/3200, then p_k = m^(k-1)/160 for k = 1..12
    p = [1 / 3200] + [EXAMPLE1_M ** (k - 1) / 160 for k in range(1, 13)]
    return {
        "name": "example1",
        "N": 1200,
        "mode": "raw",
        "delta": "inf",
        "classes": [{"label": "H", "K": 12, "sigma": 1.0, "q": p}],
    }


def _example2_doc() -> Dict[str, Any]:
    # class H: (1/2400, 1/480, m/40, ..., m^19/40), read as p_k = m^(k-1)/40 for k = 2..20
    p_h = [1 / 2400, 1 / 480] + [EXAMPLE2_M ** (k - 1) / 40 for k in range(2, 21)]
    p_l = [1 / 3840] + [1 / 64] * 20
    return {
        "name": "example2",
        "N": 1280,
        "mode": "raw",
        "delta": 0,
        "classes": [
            {"label": "H", "K": 20, "sigma": 0.5, "q": p_h},
            {"label": "L", "K": 20, "sigma": 0.5, "q": p_l},
        ],
    }


EXAMPLE_DOCUMENTS = {
    "example1": _example1_doc,
    "example2": _example2_doc,
}

# Reference values each reproduction is compared against.
REFERENCE = {
    "example1": {
        "roots": [0.540, 0.828, 0.952],
        "classification": ["stable", "unstable", "stable"],
        "root_tol": 5e-4,
        "sim_gamma_full_length": 0.832,
        "sim_mode_centers": [0.540, 0.952],
        "sim_mode_tol": 0.05,
        # N=1200 occupancy noise spreads windowed gamma_hat by about 0.05 around
        # a mode, so the +-0.05 band holds about two thirds of the windows
        "sim_mode_share": 0.60,
        "sim_stable_share": 0.90,
        "sim_full_range": [0.70, 0.95],
    },
    "example2": {
        "roots": [0.912],
        "classification": ["unstable"],
        "root_tol": 5e-4,
        "ode_period_range": [18000.0, 21000.0],
        "sim_period_range": [17000.0, 22000.0],
        "sim_gamma_range": [0.84, 0.90],
        "sim_gamma_full_length": 0.869,
    },
}


def example_document(example_id: str) -> Dict[str, Any]:
    try:
        return EXAMPLE_DOCUMENTS[example_id]()
    except KeyError:
        raise ScenarioError("example", f"unknown example {example_id!r}; "
                            f"choose from {sorted(EXAMPLE_DOCUMENTS)}") from None


def load_example(example_id: str) -> Scenario:
    return scenario_from_dict(example_document(example_id))
