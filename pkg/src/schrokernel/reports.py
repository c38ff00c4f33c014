"""Margin bookkeeping shared by every audit.

A margin is ``allowed - observed``; an audit passes when every margin is
nonnegative. Reports combine with :meth:`MarginReport.merge`, which keeps the
worst sample, so partitioned audits reduce associatively.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


@dataclass
class MarginReport:
    name: str
    verdict: bool
    worst_margin: float
    worst_point: Any = None
    grid_descriptor: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @classmethod
    def from_margins(cls, name, margins, points=None, grid_descriptor=None,
                     details=None, tol=0.0) -> "MarginReport":
        """Build a report from an array of margins; pass iff all >= -tol."""
        margins = np.asarray(margins, dtype=float).ravel()
        if margins.size == 0:
            raise ValueError(f"{name}: empty sample set")
        bad = np.isnan(margins)
        scan = np.where(bad, -np.inf, margins)
        i = int(np.argmin(scan))
        worst = float(scan[i])
        point = None
        if points is not None:
            point = np.asarray(points)[i]
            point = point.tolist() if isinstance(point, np.ndarray) else point
        return cls(name=name, verdict=bool(worst >= -tol), worst_margin=worst,
                   worst_point=point, grid_descriptor=dict(grid_descriptor or {}),
                   details=dict(details or {}))

    def merge(self, other: "MarginReport") -> "MarginReport":
        worst = self if self.worst_margin <= other.worst_margin else other
        desc = {**self.grid_descriptor, **other.grid_descriptor}
        return MarginReport(
            name=self.name,
            verdict=self.verdict and other.verdict,
            worst_margin=min(self.worst_margin, other.worst_margin),
            worst_point=worst.worst_point,
            grid_descriptor=desc,
            details={**self.details, **other.details},
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = "pass" if self.verdict else "fail"
        return _jsonable(d)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def line(self) -> str:
        tag = "PASS" if self.verdict else "FAIL"
        return f"[{tag}] {self.name}: worst margin {self.worst_margin:.4g} at {self.worst_point}"

    def __bool__(self) -> bool:
        return self.verdict
