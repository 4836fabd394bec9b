"""Server and row power models plus template-based power prediction.

A PowerCurve maps GPU load fraction to whole-server watts (fans and other
components included) as a polynomial that is pinned to idle power at zero
load and TDP at full load. PowerTemplates capture hour-of-week percentiles
of historical power for a scope (row, customer, or endpoint) and are the
basis for the allocator's peak predictions. Both are immutable after
construction; weekly refreshes build new templates and swap them in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .topology import Topology

HOURS_PER_WEEK = 168


class TemplateError(ValueError):
    """Raised when history is too short or malformed for template building."""


# ---------------------------------------------------------------------------
# Load -> power curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerCurve:
    """Polynomial watts(load) for one server, ascending coefficient order.

    Invariants: watts(0) = idle power > 0, watts(1) <= TDP, nondecreasing
    on [0, 1].
    """

    coeffs: tuple[float, ...]

    def watts(self, gpu_load: float) -> float:
        load = min(max(gpu_load, 0.0), 1.0)
        y = 0.0
        for c in reversed(self.coeffs):
            y = y * load + c
        return y

    @property
    def idle_w(self) -> float:
        return self.coeffs[0]

    @property
    def full_w(self) -> float:
        return sum(self.coeffs)


def default_power_curve(idle_w: float, tdp_w: float, shape: float = 2.0) -> PowerCurve:
    """Concave degree-2 curve through (0, idle) and (1, TDP).

    ``shape`` in (1, 2) sets the initial slope; higher values make partially
    loaded servers relatively more expensive, which is what consolidation
    exploits.
    """
    if not 1.0 <= shape <= 2.0:
        raise ValueError("shape must be in [1, 2]")
    span = tdp_w - idle_w
    return PowerCurve(coeffs=(idle_w, shape * span, (1.0 - shape) * span))


def server_power(curve: PowerCurve, gpu_load: float) -> float:
    """Whole-server watts at the given average GPU load fraction."""
    if not 0.0 <= gpu_load <= 1.0:
        raise ValueError(f"gpu_load must be in [0, 1], got {gpu_load}")
    return curve.watts(gpu_load)


def row_power(topology: Topology, curves: dict[str, PowerCurve],
              loads: dict[str, float], row_id: str) -> float:
    """Aggregate watts drawn by all servers with defined loads in a row."""
    total = 0.0
    for sid in sorted(topology.servers_in(row_id)):
        if sid in loads:
            total += curves[sid].watts(loads[sid])
    return total


def row_power_ok(topology: Topology, curves: dict[str, PowerCurve],
                 loads: dict[str, float], row_id: str,
                 effective_prov_w: float | None = None) -> tuple[bool, float]:
    """Whether row power fits within (possibly degraded) provisioned power."""
    total = row_power(topology, curves, loads, row_id)
    if effective_prov_w is None:
        effective_prov_w = next(r.prov_power_w for r in topology.rows if r.id == row_id)
    slack = effective_prov_w - total
    return slack >= 0.0, slack


# ---------------------------------------------------------------------------
# Power templates
# ---------------------------------------------------------------------------

def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: smallest value with cumulative rank >= pct."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise ValueError("empty sample")
    rank = int(np.ceil(pct / 100.0 * len(v)))
    return float(v[max(rank, 1) - 1])


@dataclass(frozen=True)
class PowerTemplate:
    """Hour-of-week percentile profile of observed watts for one scope."""

    scope_id: str
    percentile: float               # 50, 90, or 99
    slots_w: tuple[float, ...]      # exactly 168 values
    training_weeks: int

    def __post_init__(self):
        if len(self.slots_w) != HOURS_PER_WEEK:
            raise ValueError(f"need {HOURS_PER_WEEK} slots, got {len(self.slots_w)}")

    @property
    def peak_w(self) -> float:
        return max(self.slots_w)

    def to_dict(self) -> dict:
        return {"scope_id": self.scope_id, "percentile": self.percentile,
                "slots_w": list(self.slots_w), "training_weeks": self.training_weeks}

    @classmethod
    def from_dict(cls, d: dict) -> "PowerTemplate":
        return cls(scope_id=d["scope_id"], percentile=float(d["percentile"]),
                   slots_w=tuple(d["slots_w"]), training_weeks=int(d["training_weeks"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))


def build_template(scope_id: str, hours: np.ndarray, watts: np.ndarray,
                   percentile: float, ticks_per_hour: int = 60) -> PowerTemplate:
    """Build a PowerTemplate from a per-tick watt series.

    ``hours`` is the hour-of-week index (0..167) of each sample; requires at
    least one full week of contiguous coverage at tick resolution.
    """
    hours = np.asarray(hours, dtype=int)
    watts = np.asarray(watts, dtype=float)
    if len(hours) != len(watts):
        raise TemplateError("hours and watts must have equal length")
    if len(watts) < HOURS_PER_WEEK * ticks_per_hour:
        raise TemplateError("history shorter than one week")
    slots = []
    for h in range(HOURS_PER_WEEK):
        sample = watts[hours == h]
        if len(sample) == 0:
            raise TemplateError(f"no samples for hour-of-week slot {h}")
        slots.append(nearest_rank_percentile(sample, percentile))
    weeks = len(watts) // (HOURS_PER_WEEK * ticks_per_hour)
    return PowerTemplate(scope_id=scope_id, percentile=percentile,
                         slots_w=tuple(slots), training_weeks=weeks)


def predict_power(template: PowerTemplate, hour_of_week: int) -> float:
    """Slot lookup; callers with no template fall back to peak (TDP) values."""
    if not 0 <= hour_of_week < HOURS_PER_WEEK:
        raise ValueError(f"hour_of_week must be in [0, {HOURS_PER_WEEK}), "
                         f"got {hour_of_week}")
    return template.slots_w[hour_of_week]
