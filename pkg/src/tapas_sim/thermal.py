"""Thermal models for the simulated datacenter.

Three fitted relationships live here:

* server inlet temperature as a function of outside temperature and
  normalized datacenter load (piecewise polynomial in the outside
  temperature, additive polynomial in load);
* per-GPU temperature as a function of server inlet temperature and GPU
  load (piecewise polynomial in load, additive in inlet);
* server fan airflow as a linear function of GPU load, anchored so that
  80% PWM yields 840 CFM (A100) / 1105 CFM (H100).

The module also provides the least-squares fitting procedure for piecewise
models and a deterministic synthetic ground-truth generator that stands in
for measured production data. Models are immutable after fitting and
prediction is pure.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .topology import GPU_SPECS, GPUS_PER_SERVER, Topology

GPU_TEMP_THRESHOLD_C = 85.0

#: Heat recirculation: inlet penalty in degC per 10% aisle airflow deficit,
#: applied to both rows of the affected aisle.
RECIRCULATION_C_PER_10PCT = 3.0


class FittingError(ValueError):
    """Raised for degenerate sample sets (rank-deficient design matrix)."""


# ---------------------------------------------------------------------------
# Piecewise polynomial model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseModel:
    """Piecewise polynomial in a primary input with an additive polynomial
    term in a secondary input.

    ``knots`` are the segment boundaries (strictly increasing, including the
    domain ends); segment ``j`` covers ``[knots[j], knots[j+1]]``. Inputs
    are clamped to the domain, so evaluation is defined everywhere. The
    secondary-input coefficients are shared across segments, which makes the
    model continuous at knots for any secondary input value.
    """

    knots: tuple[float, ...]
    seg_coeffs: tuple[tuple[float, ...], ...]   # (n_seg, deg1 + 1), ascending powers
    x2_coeffs: tuple[float, ...]                # x2^1 .. x2^deg2
    x2_bounds: tuple[float, float]
    train_mae: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.knots)
        if len(k) < 2 or np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing with >= 2 entries")
        if len(self.seg_coeffs) != len(k) - 1:
            raise ValueError("need one coefficient set per segment")

    def segment_index(self, x1: float) -> int:
        i = int(np.searchsorted(self.knots, x1, side="right") - 1)
        return min(max(i, 0), len(self.seg_coeffs) - 1)

    def evaluate(self, x1: float, x2: float) -> float:
        x1 = min(max(x1, self.knots[0]), self.knots[-1])
        x2 = min(max(x2, self.x2_bounds[0]), self.x2_bounds[1])
        c = self.seg_coeffs[self.segment_index(x1)]
        y = 0.0
        for coef in reversed(c):
            y = y * x1 + coef
        for p, coef in enumerate(self.x2_coeffs, start=1):
            y += coef * x2 ** p
        return y

    def to_dict(self) -> dict:
        return {
            "knots": list(self.knots),
            "seg_coeffs": [list(c) for c in self.seg_coeffs],
            "x2_coeffs": list(self.x2_coeffs),
            "x2_bounds": list(self.x2_bounds),
            "train_mae": self.train_mae,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseModel":
        return cls(knots=tuple(d["knots"]),
                   seg_coeffs=tuple(tuple(c) for c in d["seg_coeffs"]),
                   x2_coeffs=tuple(d["x2_coeffs"]),
                   x2_bounds=tuple(d["x2_bounds"]),
                   train_mae=float(d.get("train_mae", 0.0)))


def fit_piecewise(x1, x2, y, knots, deg1: int = 1, deg2: int = 1,
                  monotone: bool = True) -> PiecewiseModel:
    """Least-squares fit of a PiecewiseModel with continuity at knots.

    Uses a truncated-power basis, which is continuous (indeed C^(deg1-1)) at
    the knots by construction. With ``monotone`` and ``deg1 == 1``, segment
    slopes and secondary coefficients are clamped to be nonnegative and the
    intercept refitted, so predictions are nondecreasing in both inputs.

    Requires at least 50 samples, spanning at least 2 segments whenever
    interior knots are present.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    y = np.asarray(y, dtype=float)
    knots = tuple(float(k) for k in knots)
    if len(x1) < 50:
        raise FittingError(f"need >= 50 samples, got {len(x1)}")
    interior = knots[1:-1]
    if interior:
        seg_of = np.clip(np.searchsorted(knots, x1, side="right") - 1,
                         0, len(knots) - 2)
        if len(np.unique(seg_of)) < 2:
            raise FittingError("samples must span at least 2 segments")

    cols = [x1 ** p for p in range(deg1 + 1)]
    for k in interior:
        cols.append(np.maximum(x1 - k, 0.0) ** deg1)
    for p in range(1, deg2 + 1):
        cols.append(x2 ** p)
    a_mat = np.column_stack(cols)
    coef, _, rank, _ = np.linalg.lstsq(a_mat, y, rcond=None)
    if rank < a_mat.shape[1]:
        raise FittingError("degenerate sample set: rank-deficient design matrix")

    base = coef[: deg1 + 1]
    trunc = coef[deg1 + 1: deg1 + 1 + len(interior)]
    x2c = coef[deg1 + 1 + len(interior):]

    if monotone and deg1 == 1:
        # Segment slopes are cumulative sums of the truncated-power terms.
        slopes = np.maximum(np.cumsum(np.concatenate([[base[1]], trunc])), 0.0)
        x2c = np.maximum(x2c, 0.0)
        # Rebuild a continuous piecewise-linear part anchored at knots[0],
        # then refit the intercept.
        part = np.zeros_like(y)
        for j in range(len(knots) - 1):
            lo, hi = knots[j], knots[j + 1]
            part += slopes[j] * np.clip(x1, lo, hi) - slopes[j] * lo
        for p in range(1, deg2 + 1):
            part += x2c[p - 1] * x2 ** p
        intercept = float(np.mean(y - part))
        seg_coeffs = []
        v = intercept
        for j in range(len(knots) - 1):
            seg_coeffs.append((v - slopes[j] * knots[j], slopes[j]))
            v += slopes[j] * (knots[j + 1] - knots[j])
    else:
        # Expand truncated-power terms into per-segment absolute polynomials.
        seg_coeffs = []
        for j in range(len(knots) - 1):
            c = np.zeros(deg1 + 1)
            c[: deg1 + 1] += base
            for ki, k in enumerate(interior):
                if knots[j] >= k:
                    for p in range(deg1 + 1):
                        c[p] += trunc[ki] * math.comb(deg1, p) * (-k) ** (deg1 - p)
            seg_coeffs.append(tuple(c))

    model = PiecewiseModel(
        knots=knots,
        seg_coeffs=tuple(tuple(map(float, c)) for c in seg_coeffs),
        x2_coeffs=tuple(float(c) for c in x2c),
        x2_bounds=(float(np.min(x2)), float(np.max(x2))),
    )
    pred = np.array([model.evaluate(a, b) for a, b in zip(x1, x2)])
    mae = float(np.mean(np.abs(pred - y)))
    return PiecewiseModel(knots=model.knots, seg_coeffs=model.seg_coeffs,
                          x2_coeffs=model.x2_coeffs, x2_bounds=model.x2_bounds,
                          train_mae=mae)


# ---------------------------------------------------------------------------
# Fan curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FanCurve:
    """Linear load -> PWM -> CFM mapping for one server class."""

    gpu_type: str
    cfm_per_pwm: float
    idle_pwm: float = 30.0
    full_pwm: float = 100.0

    def airflow_cfm(self, gpu_load: float) -> float:
        load = min(max(gpu_load, 0.0), 1.0)
        pwm = self.idle_pwm + (self.full_pwm - self.idle_pwm) * load
        return self.cfm_per_pwm * pwm


def default_fan_curve(gpu_type: str) -> FanCurve:
    return FanCurve(gpu_type=gpu_type, cfm_per_pwm=GPU_SPECS[gpu_type]["cfm_per_pwm"])


def fan_airflow(curve: FanCurve, gpu_load: float) -> float:
    """Server fan airflow in CFM at the given average GPU load fraction."""
    return curve.airflow_cfm(gpu_load)


def recirculation_penalty_c(demand_cfm: float, available_cfm: float,
                            per_10pct: float = RECIRCULATION_C_PER_10PCT) -> float:
    """Inlet temperature penalty when aisle airflow demand exceeds supply."""
    if demand_cfm <= available_cfm or available_cfm <= 0:
        return 0.0
    deficit = demand_cfm / available_cfm - 1.0
    return per_10pct * deficit / 0.10


# ---------------------------------------------------------------------------
# Profile set
# ---------------------------------------------------------------------------

@dataclass
class ThermalProfileSet:
    """All thermal models for one topology.

    ``spatial_offset_c`` (per server) and ``position_offset_c`` (per GPU,
    even positions cooler) record the heterogeneity that the generator baked
    into the model constants; they are informational, predictions go through
    the models.
    """

    server_ids: tuple[str, ...]
    inlet_models: dict[str, PiecewiseModel]
    gpu_models: dict[tuple[str, int], PiecewiseModel]
    fan_curves: dict[str, FanCurve]
    spatial_offset_c: dict[str, float] = field(default_factory=dict)
    position_offset_c: dict[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for sid in self.server_ids:
            if sid not in self.inlet_models:
                raise ValueError(f"missing inlet model for server {sid!r}")
            for g in range(GPUS_PER_SERVER):
                if (sid, g) not in self.gpu_models:
                    raise ValueError(f"missing GPU model for ({sid!r}, {g})")

    def predict_inlet(self, server_id: str, t_outside: float, dc_load: float) -> float:
        if not 0.0 <= dc_load <= 1.0:
            raise ValueError(f"dc_load must be in [0, 1], got {dc_load}")
        if server_id not in self.inlet_models:
            raise KeyError(f"unknown server id {server_id!r}")
        return self.inlet_models[server_id].evaluate(t_outside, dc_load)

    def predict_gpu_temp(self, server_id: str, gpu_index: int,
                         gpu_load: float, t_inlet: float) -> float:
        if not 0.0 <= gpu_load <= 1.0:
            raise ValueError(f"gpu_load must be in [0, 1], got {gpu_load}")
        key = (server_id, int(gpu_index))
        if key not in self.gpu_models:
            raise KeyError(f"unknown server/GPU {key!r}")
        return self.gpu_models[key].evaluate(gpu_load, t_inlet)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "server_ids": list(self.server_ids),
            "inlet_models": {sid: m.to_dict() for sid, m in self.inlet_models.items()},
            "gpu_models": {f"{sid}/{g}": m.to_dict()
                           for (sid, g), m in self.gpu_models.items()},
            "fan_curves": {t: {"gpu_type": c.gpu_type, "cfm_per_pwm": c.cfm_per_pwm,
                               "idle_pwm": c.idle_pwm, "full_pwm": c.full_pwm}
                           for t, c in self.fan_curves.items()},
            "spatial_offset_c": dict(self.spatial_offset_c),
            "position_offset_c": {f"{sid}/{g}": v
                                  for (sid, g), v in self.position_offset_c.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThermalProfileSet":
        def split(key):
            sid, g = key.rsplit("/", 1)
            return sid, int(g)
        return cls(
            server_ids=tuple(d["server_ids"]),
            inlet_models={sid: PiecewiseModel.from_dict(m)
                          for sid, m in d["inlet_models"].items()},
            gpu_models={split(k): PiecewiseModel.from_dict(m)
                        for k, m in d["gpu_models"].items()},
            fan_curves={t: FanCurve(**c) for t, c in d["fan_curves"].items()},
            spatial_offset_c=dict(d.get("spatial_offset_c", {})),
            position_offset_c={split(k): v
                               for k, v in d.get("position_offset_c", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ThermalProfileSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aisle_airflow_demand(topology: Topology, profiles: ThermalProfileSet,
                         loads: dict[str, float], aisle_id: str) -> float:
    """Aggregate fan airflow demand (CFM) of all servers in an aisle."""
    demand = 0.0
    for sid in sorted(topology.servers_in(aisle_id)):
        server = topology.server(sid)
        curve = profiles.fan_curves[server.gpu_type]
        demand += curve.airflow_cfm(loads[sid])
    return demand


def aisle_airflow_ok(topology: Topology, profiles: ThermalProfileSet,
                     loads: dict[str, float], aisle_id: str,
                     effective_prov_cfm: float | None = None) -> tuple[bool, float]:
    """Whether aisle airflow demand fits within (possibly degraded) supply."""
    demand = aisle_airflow_demand(topology, profiles, loads, aisle_id)
    if effective_prov_cfm is None:
        effective_prov_cfm = next(a.prov_ahu_cfm for a in topology.aisles
                                  if a.id == aisle_id)
    slack = effective_prov_cfm - demand
    return slack >= 0.0, slack


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthParams:
    """Shape parameters for the synthetic thermal generator.

    Defaults reproduce the qualitative behavior of the measured data this
    stands in for: an 18 degC inlet floor, linear response between the two
    outside-temperature knees with an attenuated slope above the upper knee,
    a ~2 degC datacenter-load effect, small spatial spreads (rows < 1 degC,
    racks within a row < 2 degC, slot height minor), and per-GPU
    heterogeneity of a few degC within a server with even positions cooler.
    """

    inlet_floor_c: float = 18.0
    knee_low_c: float = 15.0
    knee_high_c: float = 25.0
    domain_low_c: float = -20.0
    domain_high_c: float = 50.0
    slope_mid: float = 0.50
    slope_high: float = 0.25
    slope_jitter: float = 0.05
    load_coeff_c: float = 2.0
    load_coeff_jitter: float = 0.2
    row_spread_c: float = 1.0
    rack_spread_c: float = 2.0
    slot_step_c: float = 0.05
    gpu_offset_even_c: tuple[float, float] = (2.5, 6.0)
    gpu_offset_odd_c: tuple[float, float] = (4.0, 10.0)
    gpu_gain_base_c: tuple[float, float] = (26.0, 42.0)
    gpu_gain_even_c: tuple[float, float] = (0.0, 1.0)
    gpu_gain_odd_c: tuple[float, float] = (2.0, 4.0)


class GroundTruth:
    """Deterministic synthetic thermal generator for a topology.

    Exposes the exact underlying models as a ThermalProfileSet and draws
    noisy training samples from them for fitting experiments.
    """

    def __init__(self, seed: int, topology: Topology,
                 params: GroundTruthParams | None = None):
        self.seed = int(seed)
        self.topology = topology
        self.params = params or GroundTruthParams()
        self.profiles = self._build(np.random.default_rng(self.seed))

    def _build(self, rng: np.random.Generator) -> ThermalProfileSet:
        p = self.params
        topo = self.topology
        row_offset = {r.id: rng.uniform(0.0, p.row_spread_c) for r in topo.rows}
        rack_offset = {k: rng.uniform(0.0, p.rack_spread_c)
                       for r in topo.rows for k in r.racks}

        inlet_models: dict[str, PiecewiseModel] = {}
        gpu_models: dict[tuple[str, int], PiecewiseModel] = {}
        spatial: dict[str, float] = {}
        position: dict[tuple[str, int], float] = {}

        knots = (p.domain_low_c, p.knee_low_c, p.knee_high_c, p.domain_high_c)

        # Heat factors are stratified within each row: every row receives
        # the full cold-to-hot spectrum in shuffled order, the way binning
        # heterogeneous parts across racks evens out hot spots.
        heat_of: dict[str, float] = {}
        for r in topo.rows:
            sids = [s.id for s in topo.servers if s.rack in r.racks]
            ranks = rng.permutation(len(sids))
            jit = rng.uniform(0.0, 1.0, len(sids))
            for sid, k, j in zip(sids, ranks, jit):
                heat_of[sid] = (float(k) + float(j)) / len(sids)

        for s in topo.servers:
            offset = (row_offset[topo.row_of_server(s.id)]
                      + rack_offset[s.rack] + p.slot_step_c * s.slot)
            spatial[s.id] = offset
            sm = p.slope_mid + rng.uniform(-p.slope_jitter, p.slope_jitter)
            sh = p.slope_high + rng.uniform(-p.slope_jitter * 0.6, 0.0)
            lc = p.load_coeff_c + rng.uniform(-p.load_coeff_jitter, p.load_coeff_jitter)
            floor = p.inlet_floor_c + offset
            v_mid = floor + sm * (p.knee_high_c - p.knee_low_c)
            inlet_models[s.id] = PiecewiseModel(
                knots=knots,
                seg_coeffs=(
                    (floor, 0.0),
                    (floor - sm * p.knee_low_c, sm),
                    (v_mid - sh * p.knee_high_c, sh),
                ),
                x2_coeffs=(lc,),
                x2_bounds=(0.0, 1.0),
            )

            # A server's idle offsets and its load gains share one heat
            # factor: servers that sit hot also heat up faster, so idle
            # temperature is an informative ranking signal.
            heat = heat_of[s.id]
            gain_base = p.gpu_gain_base_c[0] + heat * (
                p.gpu_gain_base_c[1] - p.gpu_gain_base_c[0])
            for g in range(GPUS_PER_SERVER):
                if g % 2 == 0:
                    lo, hi = p.gpu_offset_even_c
                    gain = gain_base + rng.uniform(*p.gpu_gain_even_c)
                else:
                    lo, hi = p.gpu_offset_odd_c
                    gain = gain_base + rng.uniform(*p.gpu_gain_odd_c)
                a = lo + heat * (hi - lo) * 0.85 + rng.uniform(0.0, 0.15 * (hi - lo))
                position[(s.id, g)] = a
                gpu_models[(s.id, g)] = PiecewiseModel(
                    knots=(0.0, 1.0),
                    seg_coeffs=((a, gain),),
                    x2_coeffs=(1.0,),          # degC per degC of inlet
                    x2_bounds=(0.0, 60.0),
                )

        fan_curves = {t: default_fan_curve(t)
                      for t in sorted({s.gpu_type for s in topo.servers})}
        return ThermalProfileSet(server_ids=topo.server_ids,
                                 inlet_models=inlet_models, gpu_models=gpu_models,
                                 fan_curves=fan_curves,
                                 spatial_offset_c=spatial, position_offset_c=position)

    # -- sampling -----------------------------------------------------------

    def sample_inlet(self, server_id: str, n: int, noise_c: float = 0.3,
                     seed: int | None = None):
        """Draw (t_outside, dc_load, t_inlet + noise) training samples."""
        rng = np.random.default_rng(
            [self.seed + 1 if seed is None else seed,
             zlib.crc32(server_id.encode())])
        t_out = rng.uniform(0.0, 40.0, n)
        load = rng.uniform(0.0, 1.0, n)
        model = self.profiles.inlet_models[server_id]
        y = np.array([model.evaluate(a, b) for a, b in zip(t_out, load)])
        y += rng.normal(0.0, noise_c, n)
        return t_out, load, y

    def sample_gpu(self, server_id: str, gpu_index: int, n: int,
                   noise_c: float = 0.3, seed: int | None = None):
        """Draw (gpu_load, t_inlet, t_gpu + noise) training samples."""
        rng = np.random.default_rng(
            [self.seed + 2 if seed is None else seed,
             zlib.crc32(server_id.encode()), int(gpu_index)])
        load = rng.uniform(0.0, 1.0, n)
        t_in = rng.uniform(16.0, 32.0, n)
        model = self.profiles.gpu_models[(server_id, int(gpu_index))]
        y = np.array([model.evaluate(a, b) for a, b in zip(load, t_in)])
        y += rng.normal(0.0, noise_c, n)
        return load, t_in, y


def generate_ground_truth(seed: int, topology: Topology,
                          params: GroundTruthParams | None = None) -> GroundTruth:
    """Build the deterministic synthetic thermal generator for a topology."""
    return GroundTruth(seed, topology, params)


def fit_profile_set(gt: GroundTruth, n_samples: int = 300,
                    noise_c: float = 0.3,
                    seed: int | None = None) -> ThermalProfileSet:
    """Fit a full ThermalProfileSet from noisy ground-truth samples.

    One inlet model per server (piecewise in outside temperature, knees at
    the generator's break points) and one model per GPU (linear in load,
    additive in inlet). This is the path real deployments would take from
    telemetry; tests compare it against the exact generator models.
    """
    p = gt.params
    knots = (p.domain_low_c, p.knee_low_c, p.knee_high_c, p.domain_high_c)
    inlet_models = {}
    gpu_models = {}
    for sid in gt.topology.server_ids:
        t_out, load, y = gt.sample_inlet(sid, n_samples, noise_c, seed)
        inlet_models[sid] = fit_piecewise(t_out, load, y, knots)
        for g in range(GPUS_PER_SERVER):
            gl, t_in, yg = gt.sample_gpu(sid, g, n_samples, noise_c, seed)
            gpu_models[(sid, g)] = fit_piecewise(gl, t_in, yg, (0.0, 1.0))
    return ThermalProfileSet(server_ids=gt.topology.server_ids,
                             inlet_models=inlet_models, gpu_models=gpu_models,
                             fan_curves=dict(gt.profiles.fan_curves))
