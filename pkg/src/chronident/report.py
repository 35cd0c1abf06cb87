"""Identified-parameter report shared by both estimation methods."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ClockParams, EnsembleParams, pack_theta, upper_to_symmetric

__all__ = ["EstimateReport", "write_report_json", "read_report_json"]


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass(frozen=True)
class EstimateReport:
    """Identified ensemble parameters plus solver diagnostics.

    diagnostics always carries ``residual`` (weighted residual norm of the
    main solve), ``cond`` and ``clamped`` (names of entries raised to the
    positive floor); the MDM method adds ``L``, ``ts_target_s`` and
    ``n_residue_dim``.
    """

    method: str
    ts_seconds: float
    clocks: tuple[ClockParams, ...]
    r_upper: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "clocks", tuple(self.clocks))
        object.__setattr__(self, "r_upper", np.asarray(self.r_upper, dtype=float))

    @property
    def n(self) -> int:
        return len(self.clocks)

    @property
    def params(self) -> EnsembleParams:
        """Estimated parameters in structured form (not validated: estimated
        R may be indefinite)."""
        return EnsembleParams(
            clocks=self.clocks, R=upper_to_symmetric(self.r_upper, self.n - 1)
        )

    @property
    def theta(self) -> np.ndarray:
        """Raw parameter vector [q1 x n, q2 x n, d x n, r upper triangle]."""
        return pack_theta(self.params)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "ts_seconds": self.ts_seconds,
            "clocks": [{"q1": c.q1, "q2": c.q2, "d": c.d} for c in self.clocks],
            "r_upper": self.r_upper.tolist(),
            "theta": self.theta.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }


def write_report_json(report: EstimateReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")


def read_report_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
