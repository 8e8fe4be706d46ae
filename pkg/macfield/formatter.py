"""
Formatter module writing run artifacts.
JSON summaries and reports go through sanitize_for_json; tables are written
as CSV with pandas.
"""

import json
import math
import os
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd


def sanitize_for_json(obj):
    """
    Recursively sanitize data for JSON serialization.
    NaN becomes null, infinities become "inf"/"-inf", numpy values become
    Python values and complex numbers become [re, im] pairs.
    """
    if isinstance(obj, dict):
        return {str(k): sanitize_for_json(v) for k, v in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [sanitize_for_json(item) for item in obj]
    elif isinstance(obj, np.ndarray):
        return sanitize_for_json(obj.tolist())
    elif isinstance(obj, Enum):
        return obj.value
    elif isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    elif isinstance(obj, (int, np.integer)):
        return int(obj)
    elif isinstance(obj, (complex, np.complexfloating)):
        return [sanitize_for_json(float(obj.real)), sanitize_for_json(float(obj.imag))]
    elif isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isnan(value):
            return None
        elif math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return obj


class ReportFormatter:
    """
    Write the artifacts of one run into an output directory.

    Every written path is remembered so the final summary can list them.
    """

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.written: List[str] = []
        os.makedirs(output_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def export_json(self, name: str, data: Any) -> str:
        output_file = self.path(name)
        with open(output_file, 'w') as f:
            json.dump(sanitize_for_json(data), f, indent=2)
        self.written.append(output_file)
        return output_file

    def export_csv(self, name: str, frame: pd.DataFrame) -> str:
        output_file = self.path(name)
        frame.to_csv(output_file, index=False)
        self.written.append(output_file)
        return output_file

    def export_summary(self, name: str, results: Dict[str, Any],
                       checks: Optional[Dict[str, bool]] = None) -> Dict[str, Any]:
        """Summary with pass/fail checks, generation time and artifact list."""
        summary = {
            "results": results,
            "checks": checks or {},
            "passed": all((checks or {}).values()),
            "artifacts": [os.path.basename(p) for p in self.written],
            "generated_at": datetime.now().isoformat(),
        }
        self.export_json(name, summary)
        return summary
