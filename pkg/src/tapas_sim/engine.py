"""Discrete-time simulation core.

One tick is 60 seconds. Within a tick the order is fixed: VM arrivals and
departures through the allocator, IaaS loads from traces, SaaS request
routing, per-instance configuration, physics (power, inlet, GPU
temperatures, airflow), capping, then metrics. Physics always evaluates
the ground-truth thermal models; the control loops see either the same
models or independently fitted ones, depending on the scenario.

Failures shrink effective limits: a UPS failure scales affected rows'
power limit to 75%, an AHU failure removes one unit's share of its
aisle's airflow, and a cooling-device failure raises every inlet by the
lost capacity times the cooling delta-T. Capping enforces limits after
the fact: rows over their effective power limit get a uniform frequency
multiplier (IaaS servers first under aware policies, all servers under
the baseline), and any GPU over the temperature threshold throttles its
server by 0.7 per iteration until the projection clears.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field, replace
_dbg = {}
from pathlib import Path

import numpy as np

from .allocator import Allocator, AllocatorConfig, LoadHistory, estimate_vm_load
from .configurator import (ConfigDecision, Configurator, ProfileEvaluator,
                           allocate_quality_floors, compute_budgets,
                           quality_needed, slo_floor_class)
from .power import PowerCurve, default_power_curve
from .router import RiskCache, Router, RouterConfig
from .thermal import (GPU_TEMP_THRESHOLD_C, RECIRCULATION_C_PER_10PCT,
                      GroundTruth, ThermalProfileSet, fit_profile_set)
from .topology import GPUS_PER_SERVER, Topology, grid_topology
from .workload import (ArrivalParams, EndpointSpec, TICKS_PER_DAY,
                       TICKS_PER_WEEK, VmRecord, build_default_profiles,
                       diurnal_rate_series, generate_iaas_power_trace,
                       generate_outside_temp, generate_request_trace,
                       generate_vm_arrivals, nominal_profile)

THERMAL_THROTTLE_MULT = 0.7
UPS_CAPACITY = 0.75
COOLING_DEVICE_CAPACITY = 0.90
# Sizing slack over measured demand when picking an instance config, so a
# tick-to-tick demand wiggle does not immediately outrun goodput, and the
# lookback window the demand peak is taken over.
DEMAND_HEADROOM = 1.10
DEMAND_WINDOW_TICKS = 15

#: policy name -> (placement aware, routing aware, config aware)
POLICIES = {
    "baseline": (False, False, False),
    "place": (True, False, False),
    "route": (False, True, False),
    "config": (False, False, True),
    "place+route": (True, True, False),
    "place+config": (True, False, True),
    "route+config": (False, True, True),
    "tapas": (True, True, True),
}


class ScenarioError(ValueError):
    """Invalid scenario configuration; the message names the field."""


@dataclass(frozen=True)
class FailureEvent:
    kind: str                 # "UPS" | "AHU" | "CoolingDevice"
    scope: str                # row id, aisle id, or "*" for datacenter-wide
    start_tick: int
    duration_ticks: int

    def __post_init__(self):
        if self.kind not in ("UPS", "AHU", "CoolingDevice"):
            raise ScenarioError(f"failures.kind: unknown kind {self.kind!r}")
        if self.duration_ticks <= 0:
            raise ScenarioError("failures.duration_ticks: must be > 0")
        if self.start_tick < 0:
            raise ScenarioError("failures.start_tick: must be >= 0")

    def active(self, tick: int) -> bool:
        return self.start_tick <= tick < self.start_tick + self.duration_ticks

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scope": self.scope,
                "start_tick": self.start_tick,
                "duration_ticks": self.duration_ticks}


@dataclass(frozen=True)
class Scenario:
    """Complete, JSON-serializable description of one simulation run."""

    name: str = "reference"
    seed: int = 7
    policy: str = "tapas"
    duration_ticks: int = TICKS_PER_WEEK
    # topology
    n_aisles: int = 4
    racks_per_row: int = 6
    servers_per_rack: int = 4
    gpu_type: str = "A100"
    oversubscription_pct: float = 0.0
    delta_t_cooling_c: float = 10.0
    # workload
    n_vms: int = 164
    iaas_fraction: float = 0.4
    n_customers: int = 12
    n_endpoints: int = 10
    initial_fraction: float = 0.9
    long_lived_fraction: float = 0.7
    saas_peak_util: float = 0.5
    outside_mean_c: float = 23.0
    outside_amplitude_c: float = 6.0
    failures: tuple[FailureEvent, ...] = ()
    use_fitted_models: bool = False
    log_decisions: bool = False
    record_snapshots: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ScenarioError(f"policy: unknown policy {self.policy!r}")
        if self.duration_ticks <= 0:
            raise ScenarioError("duration_ticks: must be > 0")
        if self.oversubscription_pct < 0:
            raise ScenarioError("oversubscription_pct: must be >= 0")
        for fname in ("iaas_fraction", "initial_fraction", "long_lived_fraction"):
            v = getattr(self, fname)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{fname}: must be in [0, 1]")
        if self.n_vms <= 0:
            raise ScenarioError("n_vms: must be > 0")
        if self.saas_peak_util <= 0:
            raise ScenarioError("saas_peak_util: must be > 0")

    @property
    def n_servers(self) -> int:
        return self.n_aisles * 2 * self.racks_per_row * self.servers_per_rack

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__
             if k != "failures"}
        d["failures"] = [f.to_dict() for f in self.failures]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ScenarioError("scenario: expected a JSON object")
        known = set(cls.__dataclass_fields__)
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ScenarioError(f"{k}: unknown field")
            if k == "failures":
                try:
                    v = tuple(FailureEvent(**f) for f in v)
                except TypeError as exc:
                    raise ScenarioError(f"failures: {exc}") from None
            kwargs[k] = v
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def reference_scenario(**overrides) -> Scenario:
    """The checked-in desk-scale reference: 192 servers, one week."""
    return replace(Scenario(), **overrides)


def pressure_scenario(**overrides) -> Scenario:
    """Full occupancy, even mix: the base for sweeps and failure studies."""
    base = Scenario(name="pressure", n_vms=192, iaas_fraction=0.5,
                    initial_fraction=1.0, long_lived_fraction=1.0,
                    saas_peak_util=0.75)
    return replace(base, **overrides)


def failure_scenario(kind: str, **overrides) -> Scenario:
    """Pressure scenario plus one day-long emergency starting day 3, 04:00.

    SaaS demand runs a notch below the pressure preset: the emergency
    study measures how policies absorb a capacity cut, so the degraded
    datacenter must still be able to carry the offered load at reduced
    quality. At full pressure no policy could, and the comparison would
    collapse into pure load shedding.
    """
    start = 2 * TICKS_PER_DAY + 4 * 60
    if kind == "power":
        ev = FailureEvent("UPS", "*", start, TICKS_PER_DAY)
    elif kind == "thermal":
        ev = FailureEvent("CoolingDevice", "*", start, TICKS_PER_DAY)
    else:
        raise ScenarioError(f"failure kind: {kind!r} (want power|thermal)")
    params = dict(name=f"failure-{kind}", failures=(ev,),
                  duration_ticks=4 * TICKS_PER_DAY, saas_peak_util=0.55)
    params.update(overrides)
    return pressure_scenario(**params)


# ---------------------------------------------------------------------------
# Vectorized physics
# ---------------------------------------------------------------------------

@dataclass
class PhysicsState:
    mean_load: np.ndarray        # (n_servers,)
    watts: np.ndarray            # (n_servers,)
    cfm: np.ndarray              # (n_servers,)
    inlet_c: np.ndarray          # (n_servers,), includes recirculation
    temps_c: np.ndarray          # (n_servers, 8)
    row_watts: np.ndarray        # (n_rows,)
    aisle_cfm: np.ndarray        # (n_aisles,)
    dc_load: float


class VectorPhysics:
    """Array evaluation of the thermal/power models over a whole topology.

    Requires the uniform model shapes the fitting pipeline produces:
    shared inlet knots with linear segments and a linear load term, and
    single-segment linear GPU models with a linear inlet term. Scalar
    predictions through ThermalProfileSet agree to float precision.
    """

    def __init__(self, topology: Topology, profiles: ThermalProfileSet,
                 power_curves: dict[str, PowerCurve],
                 delta_t_cooling_c: float = 10.0):
        self.topology = topology
        self.delta_t_cooling_c = delta_t_cooling_c
        self.sids = list(topology.server_ids)
        self.index = {sid: i for i, sid in enumerate(self.sids)}
        self.row_ids = [r.id for r in topology.rows]
        self.aisle_ids = [a.id for a in topology.aisles]
        row_pos = {r: i for i, r in enumerate(self.row_ids)}
        aisle_pos = {a: i for i, a in enumerate(self.aisle_ids)}
        self.row_idx = np.array([row_pos[topology.row_of_server(s)]
                                 for s in self.sids])
        self.aisle_idx = np.array([aisle_pos[topology.aisle_of_server(s)]
                                   for s in self.sids])
        self.prov_row_w = np.array([r.prov_power_w for r in topology.rows])
        self.prov_ahu_cfm = np.array([a.prov_ahu_cfm for a in topology.aisles])
        self.total_tdp_w = topology.total_tdp_w()

        n = len(self.sids)
        ref = profiles.inlet_models[self.sids[0]]
        self.inlet_knots = np.array(ref.knots)
        nseg = len(ref.knots) - 1
        self.in_a = np.empty((n, nseg))
        self.in_b = np.empty((n, nseg))
        self.in_c = np.empty(n)
        self.in_x2lo = np.empty(n)
        self.in_x2hi = np.empty(n)
        for i, sid in enumerate(self.sids):
            m = profiles.inlet_models[sid]
            if tuple(m.knots) != tuple(ref.knots):
                raise ValueError("inlet models must share knots")
            for j, (c0, c1) in enumerate(m.seg_coeffs):
                self.in_a[i, j] = c0
                self.in_b[i, j] = c1
            self.in_c[i] = m.x2_coeffs[0]
            self.in_x2lo[i], self.in_x2hi[i] = m.x2_bounds

        self.g_off = np.empty((n, GPUS_PER_SERVER))
        self.g_gain = np.empty((n, GPUS_PER_SERVER))
        self.g_beta = np.empty((n, GPUS_PER_SERVER))
        self.g_x2lo = np.empty((n, GPUS_PER_SERVER))
        self.g_x2hi = np.empty((n, GPUS_PER_SERVER))
        for i, sid in enumerate(self.sids):
            for g in range(GPUS_PER_SERVER):
                m = profiles.gpu_models[(sid, g)]
                if len(m.seg_coeffs) != 1:
                    raise ValueError("GPU models must be single-segment")
                self.g_off[i, g], self.g_gain[i, g] = m.seg_coeffs[0]
                self.g_beta[i, g] = m.x2_coeffs[0]
                self.g_x2lo[i, g], self.g_x2hi[i, g] = m.x2_bounds

        self.fan_cpp = np.empty(n)
        self.fan_idle = np.empty(n)
        self.fan_span = np.empty(n)
        self.pcoef = np.zeros((n, 3))
        for i, sid in enumerate(self.sids):
            s = topology.server(sid)
            fc = profiles.fan_curves[s.gpu_type]
            self.fan_cpp[i] = fc.cfm_per_pwm
            self.fan_idle[i] = fc.idle_pwm
            self.fan_span[i] = fc.full_pwm - fc.idle_pwm
            coeffs = power_curves[sid].coeffs
            self.pcoef[i, :len(coeffs)] = coeffs

    def compute(self, loads: np.ndarray, t_outside_c: float,
                eff_ahu_cfm: np.ndarray,
                cooling_capacity: float = 1.0) -> PhysicsState:
        loads = np.clip(loads, 0.0, 1.0)
        mean = loads.mean(axis=1)
        watts = (self.pcoef[:, 0] + self.pcoef[:, 1] * mean
                 + self.pcoef[:, 2] * mean * mean)
        dc_load = float(min(max(watts.sum() / self.total_tdp_w, 0.0), 1.0))
        x2 = np.clip(dc_load, self.in_x2lo, self.in_x2hi)
        x1 = min(max(t_outside_c, self.inlet_knots[0]), self.inlet_knots[-1])
        seg = int(np.clip(np.searchsorted(self.inlet_knots, x1, side="right") - 1,
                          0, self.in_a.shape[1] - 1))
        inlet = self.in_b[:, seg] * x1 + self.in_a[:, seg] + self.in_c * x2
        if cooling_capacity < 1.0:
            inlet = inlet + (1.0 - cooling_capacity) * self.delta_t_cooling_c
        cfm = self.fan_cpp * (self.fan_idle + self.fan_span * mean)
        aisle_cfm = np.bincount(self.aisle_idx, weights=cfm,
                                minlength=len(self.aisle_ids))
        deficit = np.maximum(aisle_cfm / eff_ahu_cfm - 1.0, 0.0)
        recirc = RECIRCULATION_C_PER_10PCT * deficit / 0.10
        inlet = inlet + recirc[self.aisle_idx]
        t_in = np.clip(inlet[:, None], self.g_x2lo, self.g_x2hi)
        temps = self.g_gain * loads + self.g_off + self.g_beta * t_in
        row_w = np.bincount(self.row_idx, weights=watts,
                            minlength=len(self.row_ids))
        return PhysicsState(mean_load=mean, watts=watts, cfm=cfm,
                            inlet_c=inlet, temps_c=temps, row_watts=row_w,
                            aisle_cfm=aisle_cfm, dc_load=dc_load)


class _FastEvaluator:
    """Drop-in for ProfileEvaluator using plain-float model constants.

    Per-GPU temperatures are affine in load, so the hottest GPU under a
    profile is a max over at most eight lines; everything here is scalar
    float math to keep the configurator scan cheap.
    """

    def __init__(self, phys: VectorPhysics, server_i: int, inlet_c: float,
                 pcurve_coeffs, fan: tuple[float, float, float]):
        self.server_id = phys.sids[server_i]
        self.inlet_c = inlet_c
        t_in = np.clip(inlet_c, phys.g_x2lo[server_i], phys.g_x2hi[server_i])
        base = (phys.g_off[server_i] + phys.g_beta[server_i] * t_in).tolist()
        gain = phys.g_gain[server_i].tolist()
        self._lines = {}
        for tp in (2, 4, 8):
            idle_max = max(base[tp:]) if tp < len(base) else float("-inf")
            self._lines[tp] = (base[:tp], gain[:tp], idle_max)
        self._pc = tuple(float(c) for c in pcurve_coeffs)
        self._fan = fan

    def temp_c(self, p, utilization: float = 1.0) -> float:
        base, gain, idle_max = self._lines[p.tp]
        x = p.gpu_intensity * min(max(utilization, 0.0), 1.0)
        best = idle_max
        for b, g in zip(base, gain):
            v = b + g * x
            if v > best:
                best = v
        return best

    def watts(self, p, utilization: float = 1.0) -> float:
        m = p.mean_load * min(max(utilization, 0.0), 1.0)
        return self._pc[0] + self._pc[1] * m + self._pc[2] * m * m

    def cfm(self, p, utilization: float = 1.0) -> float:
        cpp, idle, span = self._fan
        return cpp * (idle + span * p.mean_load
                      * min(max(utilization, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    scenario: str
    policy: str
    seed: int
    n_ticks: int
    n_rows: int
    max_temp_c: np.ndarray = None
    peak_row_watts: np.ndarray = None
    peak_row_id: list = None
    row_watts: np.ndarray = None          # (n_ticks, n_rows)
    thermal_capped: np.ndarray = None     # servers per tick
    power_capped: np.ndarray = None
    any_capped: np.ndarray = None
    occupied: np.ndarray = None
    iaas_depth: np.ndarray = None         # mean cap depth over IaaS servers
    saas_offered: np.ndarray = None
    saas_served: np.ndarray = None
    saas_violations: np.ndarray = None
    quality_tokens: np.ndarray = None     # sum of quality x served tokens
    placement_failures: int = 0

    def window(self, t0: int = 0, t1: int | None = None) -> dict:
        """Aggregate metrics over [t0, t1)."""
        t1 = self.n_ticks if t1 is None else t1
        sl = slice(t0, t1)
        occ = float(self.occupied[sl].sum())
        offered = float(self.saas_offered[sl].sum())
        served = float(self.saas_served[sl].sum())
        return {
            "peak_temp_c": float(self.max_temp_c[sl].max()),
            "peak_row_power_w": float(self.peak_row_watts[sl].max()),
            "capping_fraction": float(self.any_capped[sl].sum()) / max(occ, 1.0),
            "capping_fraction_thermal": float(self.thermal_capped[sl].sum())
                                        / max(occ, 1.0),
            "capping_fraction_power": float(self.power_capped[sl].sum())
                                      / max(occ, 1.0),
            "iaas_cap_depth": float(self.iaas_depth[sl].mean()),
            "saas_offered_tokens": offered,
            "saas_served_tokens": served,
            "saas_slo_violation_fraction":
                float(self.saas_violations[sl].sum()) / max(offered, 1.0),
            "saas_served_fraction": served / max(offered, 1.0),
            "saas_avg_quality": float(self.quality_tokens[sl].sum())
                                / max(served, 1.0),
        }

    def summary(self) -> dict:
        out = {"scenario": self.scenario, "policy": self.policy,
               "seed": self.seed, "ticks": self.n_ticks,
               "placement_failures": self.placement_failures,
               "energy_kwh": round(float(self.row_watts.sum()) * 60 / 3.6e6, 6)}
        for k, v in self.window().items():
            out[k] = round(v, 9) if isinstance(v, float) else v
        return out

    def save_metrics(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1,
                                         sort_keys=True) + "\n")

    def save_timeseries(self, path: str | Path) -> None:
        """CSV schema: tick,max_temp_c,row_id,row_watts,capping_flags.

        ``row_id``/``row_watts`` describe the highest-power row that tick;
        ``capping_flags`` is T<thermal-count>P<power-count>.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "max_temp_c", "row_id", "row_watts",
                        "capping_flags"])
            for t in range(self.n_ticks):
                w.writerow([t, f"{self.max_temp_c[t]:.4f}",
                            self.peak_row_id[t],
                            f"{self.peak_row_watts[t]:.3f}",
                            f"T{int(self.thermal_capped[t])}"
                            f"P{int(self.power_capped[t])}"])


def emergency_impacts(fail: MetricsReport, normal: MetricsReport,
                      t0: int, t1: int) -> dict:
    """Impact percentages over the failure window, relative to an identical
    run without the failure: negative numbers mean degradation.
    """
    f, n = fail.window(t0, t1), normal.window(t0, t1)
    return {
        "iaas_perf_impact_pct":
            round(-100.0 * (f["iaas_cap_depth"] - n["iaas_cap_depth"]), 6),
        "saas_perf_impact_pct":
            round(100.0 * (f["saas_served_fraction"]
                           - n["saas_served_fraction"]), 6),
        "saas_quality_impact_pct":
            round(100.0 * (f["saas_avg_quality"] - n["saas_avg_quality"]), 6),
    }


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

class Engine:
    """Owns all per-run state; ``run`` drives ``step`` over the horizon."""

    def __init__(self, scenario: Scenario):
        scenario = Scenario.from_dict(scenario.to_dict())  # revalidate
        self.sc = scenario
        self.place_aware, self.route_aware, self.config_aware = \
            POLICIES[scenario.policy]
        self.topology = grid_topology(
            n_aisles=scenario.n_aisles, racks_per_row=scenario.racks_per_row,
            servers_per_rack=scenario.servers_per_rack,
            gpu_type=scenario.gpu_type,
            oversubscription=scenario.oversubscription_pct / 100.0,
            delta_t_cooling=scenario.delta_t_cooling_c)
        self.gt = GroundTruth(scenario.seed, self.topology)
        self.ctl_models = (fit_profile_set(self.gt)
                           if scenario.use_fitted_models else self.gt.profiles)
        self.curves = {s.id: default_power_curve(s.idle_power_w, s.tdp_w)
                       for s in self.topology.servers}
        self.phys = VectorPhysics(self.topology, self.gt.profiles, self.curves,
                                  scenario.delta_t_cooling_c)
        self.ctl_phys = (self.phys if self.ctl_models is self.gt.profiles
                         else VectorPhysics(self.topology, self.ctl_models,
                                            self.curves,
                                            scenario.delta_t_cooling_c))

        # The operating mix threshold is tighter than the structural 60%
        # default: at this fleet composition a row only reads as skewed
        # once it is well past a balanced share, so a lower trip point is
        # what actually levels IaaS across rows.
        self.allocator = Allocator(self.topology, self.ctl_models, self.curves,
                                   AllocatorConfig(aware=self.place_aware,
                                                   mix_threshold=0.4))
        self.router = Router(RouterConfig(aware=self.route_aware))
        self.router.log_enabled = scenario.log_decisions
        self.table = build_default_profiles()
        self.nominal = nominal_profile(self.table)
        self.configurator = Configurator(self.table, self.nominal)
        self.history = LoadHistory()

        self._evaluators: dict[tuple, _FastEvaluator] = {}

        # Traces.
        arrivals = generate_vm_arrivals(ArrivalParams(
            n_vms=scenario.n_vms, n_servers=self.topology.server_count,
            iaas_fraction=scenario.iaas_fraction,
            n_customers=scenario.n_customers,
            n_endpoints=scenario.n_endpoints,
            arrival_window_ticks=max(scenario.duration_ticks - 1, 1),
            initial_fraction=scenario.initial_fraction,
            long_lived_fraction=scenario.long_lived_fraction), scenario.seed)
        self.arrivals_at: dict[int, list[VmRecord]] = {}
        for vm in arrivals:
            self.arrivals_at.setdefault(vm.arrival_tick, []).append(vm)

        ep_counts: dict[str, int] = {}
        for vm in arrivals:
            if vm.kind == "saas":
                ep_counts[vm.endpoint_id] = ep_counts.get(vm.endpoint_id, 0) + 1
        self.endpoints: dict[str, EndpointSpec] = {}
        self.batches_at: dict[int, list] = {}
        for ep_id in sorted(ep_counts):
            peak = (scenario.saas_peak_util * ep_counts[ep_id]
                    * self.nominal.goodput_tps)
            rates = diurnal_rate_series(scenario.duration_ticks, peak,
                                        scenario.seed, ep_id)
            spec = EndpointSpec(endpoint_id=ep_id, vm_count=ep_counts[ep_id],
                                rate_tps=tuple(rates))
            self.endpoints[ep_id] = spec
            # Keep batches well below one VM's per-tick capacity so routing
            # can always pack them.
            per_tick = max(8, 8 * ep_counts[ep_id])
            for b in generate_request_trace(spec, scenario.seed,
                                            batches_per_tick=per_tick):
                self.batches_at.setdefault(b.tick, []).append(b)

        self.t_outside = generate_outside_temp(
            scenario.duration_ticks, scenario.seed,
            mean_c=scenario.outside_mean_c,
            daily_amplitude_c=scenario.outside_amplitude_c)

        self._check_failures()

        # Mutable per-run state.
        n = len(self.phys.sids)
        self.loads = np.zeros((n, GPUS_PER_SERVER))
        self.vm_rec: dict[str, VmRecord] = {}
        self.iaas_traces: dict[str, np.ndarray] = {}
        self.saas_live: list[str] = []
        self.iaas_live: list[str] = []
        self.departures_at: dict[int, list[str]] = {}
        self.static_decision: dict[str, ConfigDecision] = {}
        self._recent_demand: dict[str, deque] = {}
        self._recent_share: dict[str, deque] = {}
        self.risk_cache: RiskCache | None = None
        self._risk_watts: dict[str, float] = {}
        self.last_phys: PhysicsState | None = None
        self._last_mult: np.ndarray | None = None
        self.snapshots: list[dict] = []
        self._m: dict[str, list] = {k: [] for k in (
            "max_temp", "peak_row_w", "peak_row_id", "thermal", "power",
            "any", "occupied", "iaas_depth", "offered", "served",
            "violations", "quality", "rows")}

    def _check_failures(self):
        rows = {r.id for r in self.topology.rows}
        aisles = {a.id for a in self.topology.aisles}
        seen: list[FailureEvent] = []
        for ev in self.sc.failures:
            if ev.kind == "UPS" and ev.scope not in rows | {"*"}:
                raise ScenarioError(f"failures.scope: unknown row {ev.scope!r}")
            if ev.kind == "AHU" and ev.scope not in aisles | {"*"}:
                raise ScenarioError(f"failures.scope: unknown aisle {ev.scope!r}")
            for other in seen:
                if (other.kind, other.scope) == (ev.kind, ev.scope) and (
                        ev.start_tick < other.start_tick + other.duration_ticks
                        and other.start_tick < ev.start_tick + ev.duration_ticks):
                    raise ScenarioError(
                        f"failures: overlapping {ev.kind} events on {ev.scope!r}")
            seen.append(ev)

    # -- helpers -------------------------------------------------------------

    def _effective_limits(self, tick: int):
        eff_row = self.phys.prov_row_w.copy()
        eff_ahu = self.phys.prov_ahu_cfm.copy()
        cooling = 1.0
        active = False
        for ev in self.sc.failures:
            if not ev.active(tick):
                continue
            active = True
            if ev.kind == "UPS":
                if ev.scope == "*":
                    eff_row *= UPS_CAPACITY
                else:
                    eff_row[self.phys.row_ids.index(ev.scope)] *= UPS_CAPACITY
            elif ev.kind == "AHU":
                for i, a in enumerate(self.topology.aisles):
                    if ev.scope in ("*", a.id):
                        eff_ahu[i] *= (a.ahu_units - 1) / a.ahu_units
            else:
                cooling = min(cooling, COOLING_DEVICE_CAPACITY)
        # Mirror into the allocator's validator state.
        for i, rid in enumerate(self.phys.row_ids):
            self.allocator.state.effective_row_w[rid] = float(eff_row[i])
        for i, aid in enumerate(self.phys.aisle_ids):
            self.allocator.state.effective_ahu_cfm[aid] = float(eff_ahu[i])
        return eff_row, eff_ahu, cooling, active

    def _on_place(self, vm: VmRecord, tick: int):
        self.vm_rec[vm.vm_id] = vm
        end = vm.arrival_tick + vm.lifetime_ticks
        if end < self.sc.duration_ticks:
            self.departures_at.setdefault(end, []).append(vm.vm_id)
        if vm.kind == "iaas":
            self.iaas_live.append(vm.vm_id)
            self.iaas_traces[vm.vm_id] = generate_iaas_power_trace(
                vm, self.sc.seed)
        else:
            self.saas_live.append(vm.vm_id)
            if self.config_aware:
                self.configurator.add_vm(vm.vm_id)
            else:
                self.static_decision[vm.vm_id] = ConfigDecision(self.nominal)

    def _on_depart(self, vm_id: str):
        vm = self.vm_rec.pop(vm_id)
        sid = self.allocator.state.vm_server[vm_id]
        self.loads[self.phys.index[sid], :] = 0.0
        self.allocator.release(vm_id)
        if vm.kind == "iaas":
            self.iaas_live.remove(vm_id)
            del self.iaas_traces[vm_id]
        else:
            self.saas_live.remove(vm_id)
            self.configurator.remove_vm(vm_id)
            self.static_decision.pop(vm_id, None)
            self.router.forget_vm(vm_id)

    def _decision(self, vm_id: str) -> ConfigDecision:
        if self.config_aware:
            return self.configurator.decision(vm_id)
        return self.static_decision[vm_id]

    def _evaluator(self, server_i: int, inlet_c: float) -> _FastEvaluator:
        key = (server_i, round(inlet_c * 2.0))
        ev = self._evaluators.get(key)
        if ev is None:
            sid = self.phys.sids[server_i]
            s = self.topology.server(sid)
            fc = self.ctl_models.fan_curves[s.gpu_type]
            ev = _FastEvaluator(self.ctl_phys, server_i,
                                round(inlet_c * 2.0) / 2.0,
                                self.ctl_phys.pcoef[server_i],
                                (fc.cfm_per_pwm, fc.idle_pwm,
                                 fc.full_pwm - fc.idle_pwm))
            self._evaluators[key] = ev
        return ev

    def _build_risk_cache(self, tick: int, eff_row, eff_ahu,
                          cooling: float) -> RiskCache:
        """Vectorized equivalent of router.refresh_risk on the controller
        models, using the previous tick's loads as the projection.
        """
        cfg = self.router.config
        p = self.ctl_phys.compute(self.loads, self.t_outside[tick],
                                  eff_ahu, cooling)
        maxt = p.temps_c.max(axis=1)
        cache = RiskCache(tick=tick, refresh_interval=cfg.refresh_interval)
        margin = cfg.margin
        pmargin = cfg.power_margin
        row_base = p.row_watts.copy()
        self._risk_watts = {}
        for vm_id in self.saas_live:
            sid = self.allocator.state.vm_server[vm_id]
            i = self.phys.index[sid]
            ai, ri = self.phys.aisle_idx[i], self.phys.row_idx[i]
            ahu_lim, pow_lim = float(eff_ahu[ai]), float(eff_row[ri])
            cache.airflow_risk[vm_id] = \
                p.aisle_cfm[ai] > (1.0 - margin) * ahu_lim
            cache.power_risk[vm_id] = \
                p.row_watts[ri] > (1.0 - margin) * pow_lim
            cache.thermal_risk[vm_id] = \
                maxt[i] > (1.0 - margin) * GPU_TEMP_THRESHOLD_C
            cache.min_slack[vm_id] = min(
                (ahu_lim - p.aisle_cfm[ai]) / ahu_lim,
                (pow_lim - p.row_watts[ri]) / pow_lim,
                (GPU_TEMP_THRESHOLD_C - maxt[i]) / GPU_TEMP_THRESHOLD_C)
            self._risk_watts[vm_id] = float(p.watts[i])
            curve = self.curves[sid]
            row_base[ri] -= float(p.watts[i]) - curve.idle_w
            cache.row_of[vm_id] = ri
            cache.vm_span_w[vm_id] = curve.full_w - curve.idle_w
        cache.row_base_w = {ri: float(row_base[ri])
                            for ri in range(len(row_base))}
        cache.row_cap_w = {ri: (1.0 - pmargin) * float(eff_row[ri])
                           for ri in range(len(row_base))}
        return cache

    def _risk_discrepancy(self) -> bool:
        if self.last_phys is None or not self._risk_watts:
            return False
        for vm_id, proj in self._risk_watts.items():
            if vm_id not in self.vm_rec:
                continue
            sid = self.allocator.state.vm_server[vm_id]
            actual = float(self.last_phys.watts[self.phys.index[sid]])
            if abs(actual - proj) > self.router.config.discrepancy_fraction \
                    * max(proj, 1.0):
                return True
        return False

    # -- capping ---------------------------------------------------------

    def _cap_row_power(self, eff_row, mult, power_capped: set[int]):
        """Scale loads per over-limit row; returns True if anything changed."""
        mean = np.clip(self.loads, 0.0, 1.0).mean(axis=1)
        watts = (self.phys.pcoef[:, 0] + self.phys.pcoef[:, 1] * mean
                 + self.phys.pcoef[:, 2] * mean * mean)
        row_w = np.bincount(self.phys.row_idx, weights=watts,
                            minlength=len(self.phys.row_ids))
        changed = False
        for ri in np.nonzero(row_w > eff_row + 1e-6)[0]:
            members = np.nonzero(self.phys.row_idx == ri)[0]
            limit = float(eff_row[ri])
            if self.place_aware or self.route_aware or self.config_aware:
                occupancy = self.allocator.state
                iaas = [i for i in members
                        if occupancy.occupancy[self.phys.sids[i]] is not None
                        and occupancy.vm_kind[
                            occupancy.occupancy[self.phys.sids[i]]] == "iaas"]
                groups = [np.array(iaas, dtype=int), members]
            else:
                groups = [members]
            for subset in groups:
                if len(subset) == 0:
                    continue
                if self._row_watts_with(members, subset, 0.0) > limit + 1e-6:
                    # Even zeroing this group is not enough; zero and escalate.
                    m = 0.0
                else:
                    lo, hi = 0.0, 1.0
                    for _ in range(50):
                        mid = 0.5 * (lo + hi)
                        if self._row_watts_with(members, subset, mid) > limit:
                            hi = mid
                        else:
                            lo = mid
                    m = lo
                if m < 1.0 - 1e-12:
                    self.loads[subset] *= m
                    mult[subset] *= m
                    power_capped.update(int(i) for i in subset
                                        if self.allocator.state.occupancy[
                                            self.phys.sids[i]] is not None)
                    changed = True
                if self._row_watts_with(members, subset, 1.0) <= limit + 1e-6:
                    break
        return changed

    def _row_watts_with(self, members, subset, m: float) -> float:
        loads = np.clip(self.loads[members], 0.0, 1.0)
        scale = np.ones(len(members))
        pos = {int(i): j for j, i in enumerate(members)}
        for i in subset:
            scale[pos[int(i)]] = m
        mean = (loads * scale[:, None]).mean(axis=1)
        pc = self.phys.pcoef[members]
        return float((pc[:, 0] + pc[:, 1] * mean + pc[:, 2] * mean * mean).sum())

    # -- one tick ----------------------------------------------------------

    def step(self, tick: int):
        sc = self.sc
        eff_row, eff_ahu, cooling, fail_active = self._effective_limits(tick)

        # (1) departures, queued retries, arrivals
        for vm_id in self.departures_at.pop(tick, ()):
            self._on_depart(vm_id)
        for vm, sid in self.allocator.retry_pending(tick):
            self._on_place(vm, tick)
        for vm in self.arrivals_at.get(tick, ()):
            est = estimate_vm_load(self.history, vm)
            sid = self.allocator.place_vm(vm, est, tick)
            if sid is not None:
                self._on_place(vm, tick)

        # (2) IaaS loads from traces
        for vm_id in self.iaas_live:
            vm = self.vm_rec[vm_id]
            sid = self.allocator.state.vm_server[vm_id]
            self.loads[self.phys.index[sid], :] = \
                self.iaas_traces[vm_id][tick - vm.arrival_tick]

        # (3) routing
        assigned: dict[str, float] = {}
        offered = violations = 0.0
        batches = self.batches_at.get(tick, ())
        if batches:
            if self.route_aware and (
                    self.risk_cache is None or self.risk_cache.is_stale(tick)
                    or self._risk_discrepancy()):
                self.risk_cache = self._build_risk_cache(tick, eff_row,
                                                         eff_ahu, cooling)
            cache = self.risk_cache or RiskCache(tick=tick)
            if self.config_aware:
                goodput_tokens = {
                    v: self.configurator.routable_goodput_tps(v) * 60.0
                    for v in self.saas_live}
            else:
                goodput_tokens = {v: self._decision(v).goodput_tps * 60.0
                                  for v in self.saas_live}
            # A server capped last tick will very likely be capped again
            # while the same limit binds; tokens routed above its enforced
            # rate are simply clipped, so advertise the reduced rate and
            # let the overflow land on members in unconstrained rows.
            if self._last_mult is not None:
                for v in goodput_tokens:
                    sid = self.allocator.state.vm_server[v]
                    goodput_tokens[v] *= self._last_mult[self.phys.index[sid]]
            by_ep: dict[str, list[str]] = {}
            for v in self.saas_live:
                if self._decision(v).routable:
                    by_ep.setdefault(self.vm_rec[v].endpoint_id, []).append(v)
            for batch in batches:
                offered += batch.tokens
                vms = by_ep.get(batch.endpoint_id)
                if not vms:
                    violations += batch.tokens
                    _dbg['drop'] = _dbg.get('drop', 0.0) + batch.tokens
                    continue
                # A batch its routed target cannot fully absorb splits:
                # the remainder re-routes to the next-best member. With
                # whole-batch placement, a saturated fleet strands just
                # under one batch of spare on every member while the
                # overflow piles onto one of them and clips.
                part = batch
                vm = None
                for _ in range(max(4, len(vms))):
                    vm = self.router.route(part, vms, cache, assigned,
                                           goodput_tokens, tick)
                    spare = (goodput_tokens.get(vm, 0.0)
                             - assigned.get(vm, 0.0))
                    if spare >= part.tokens or spare <= 0.0:
                        break
                    assigned[vm] = assigned.get(vm, 0.0) + spare
                    keep = 1.0 - spare / part.tokens
                    part = replace(
                        part, prompt_tokens=part.prompt_tokens * keep,
                        decode_tokens=part.decode_tokens * keep)
                assigned[vm] = assigned.get(vm, 0.0) + part.tokens

        # (4) configurators
        if self.config_aware and self.saas_live:
            # Size against the recent demand peak, not the instantaneous
            # sample: per-tick token shares are noisy and one quiet tick
            # must not shrink an instance below tomorrow-morning's load.
            # The floor at the endpoint's per-member share matters: the
            # router steers traffic away from a saturated downsized
            # instance, so its own assignment alone would never show the
            # demand that justifies sizing it back up.
            ep_tokens: dict[str, float] = {}
            ep_size: dict[str, int] = {}
            for v in self.saas_live:
                ep_size[self.vm_rec[v].endpoint_id] = \
                    ep_size.get(self.vm_rec[v].endpoint_id, 0) + 1
            for batch in batches:
                ep_tokens[batch.endpoint_id] = \
                    ep_tokens.get(batch.endpoint_id, 0.0) + batch.tokens
            for v in self.saas_live:
                ep = self.vm_rec[v].endpoint_id
                share = ep_tokens.get(ep, 0.0) / max(ep_size[ep], 1)
                hist = self._recent_demand.setdefault(
                    v, deque(maxlen=DEMAND_WINDOW_TICKS))
                hist.append(max(assigned.get(v, 0.0), share))
                ep_hist = self._recent_share.setdefault(
                    v, deque(maxlen=DEMAND_WINDOW_TICKS))
                ep_hist.append(share)
            prev = self.last_phys
            watts_now = {}
            cfm_now = {}
            inlet_now = {}
            for sid, i in self.phys.index.items():
                if prev is not None:
                    watts_now[sid] = float(prev.watts[i])
                    cfm_now[sid] = float(prev.cfm[i])
                    inlet_now[sid] = float(prev.inlet_c[i])
                else:
                    watts_now[sid] = float(self.phys.pcoef[i, 0])
                    cfm_now[sid] = float(self.phys.fan_cpp[i]
                                         * self.phys.fan_idle[i])
                    inlet_now[sid] = 25.0
            # Project each SaaS server's draw at the planning demand (the
            # same rolling peak the selector sizes against), not this
            # tick's sample. Budgets and selection then see one consistent
            # picture; mixing a quiet tick's draw with a peak-sized demand
            # starves the budget and flips profiles back and forth.
            plan_tokens = {v: max(self._recent_demand[v]) * DEMAND_HEADROOM
                           for v in self.saas_live}
            smooth_tokens = {v: max(self._recent_share[v]) * DEMAND_HEADROOM
                             for v in self.saas_live}
            for v in self.saas_live:
                dec = self._decision(v)
                sid = self.allocator.state.vm_server[v]
                cap = dec.goodput_tps * 60.0
                u = min(plan_tokens[v] / cap, 1.0) if cap > 0 else 0.0
                mean = dec.profile.mean_load * u
                watts_now[sid] = self.curves[sid].watts(mean)
                gt = self.topology.server(sid).gpu_type
                cfm_now[sid] = self.ctl_models.fan_curves[gt].airflow_cfm(mean)
            st = self.allocator.state
            # Budgets split the row pool by smooth endpoint share, not by
            # the spiked plan: overflow a member absorbed only exists
            # because a peer underserved, and paying the absorber more
            # watts starves that peer below the cheapest serving profile
            # for its own slice, locking the imbalance in.
            budgets = compute_budgets(
                self.topology, st.vm_server, st.vm_kind, watts_now, cfm_now,
                st.effective_ahu_cfm, st.effective_row_w, smooth_tokens, tick)
            # The quality floor is allocated per endpoint by need: each
            # member reports the quality class it must drop to in order to
            # keep serving within its budget, and the endpoint's headroom
            # (members x (1 - SLO)) goes to the neediest members first.
            # Deciding floors from the members' current qualities instead
            # would let early movers hold the whole headroom and pin a
            # power-starved peer at full quality on a tiny profile.
            ep_members: dict[str, list[str]] = {}
            for v in self.saas_live:
                ep_members.setdefault(self.vm_rec[v].endpoint_id, []).append(v)
            evals: dict[str, ProfileEvaluator] = {}
            floors: dict[str, float] = {}
            # Needs and headroom weights use the endpoint's smooth
            # per-member share, not the consolidation-spiked plan: a VM
            # that briefly absorbed three members' traffic does not "need"
            # a deep quality cut to carry its long-run slice.
            for ep, members in ep_members.items():
                need = {}
                for v in members:
                    sid = self.allocator.state.vm_server[v]
                    evals[v] = self._evaluator(self.phys.index[sid],
                                               inlet_now[sid])
                    need[v] = quality_needed(self.table, budgets[v],
                                             evals[v],
                                             smooth_tokens[v] / 60.0)
                slo = self.endpoints[ep].quality_slo
                ep_floors = allocate_quality_floors(
                    need, slo, {v: smooth_tokens[v] for v in members})
                # Served quality is token-weighted and overflow lands on
                # the members with the most spare goodput, i.e. the
                # reduced-quality ones, so a below-SLO class on any member
                # can sink the endpoint average. Clamp every floor at the
                # lowest class that meets the SLO outright.
                q_min = slo_floor_class(self.table, slo)
                floors.update({v: max(f, q_min)
                               for v, f in ep_floors.items()})
            # Reloads are serialized per endpoint: only a sliver of an
            # endpoint's members may be mid-reload at once, so a mass
            # reconfiguration rolls through in waves instead of taking the
            # whole endpoint out of rotation for a tick.
            in_flight = {ep: sum(1 for v in members
                                 if self._decision(v).transition_ticks > 0)
                         for ep, members in ep_members.items()}
            slots = {ep: max(1, len(members) // 4)
                     for ep, members in ep_members.items()}
            for v in sorted(self.saas_live):
                ep = self.vm_rec[v].endpoint_id
                was = self._decision(v).transition_ticks > 0
                dec = self.configurator.step(
                    v, budgets[v], evals[v], plan_tokens[v] / 60.0,
                    floors[v], tick, failure_active=fail_active,
                    allow_reload=in_flight[ep] < slots[ep])
                if not was and dec.transition_ticks > 0:
                    in_flight[ep] += 1

        # SaaS loads from utilization.
        for v in self.saas_live:
            dec = self._decision(v)
            sid = self.allocator.state.vm_server[v]
            i = self.phys.index[sid]
            cap = dec.goodput_tps * 60.0
            util = min(assigned.get(v, 0.0) / cap, 1.0) if cap > 0 else 0.0
            self.loads[i, :] = 0.0
            self.loads[i, :dec.profile.tp] = dec.profile.gpu_intensity * util

        # (5) physics, (6) capping
        mult = np.ones(len(self.phys.sids))
        power_capped: set[int] = set()
        thermal_capped: set[int] = set()
        self._cap_row_power(eff_row, mult, power_capped)
        state = self.phys.compute(self.loads, self.t_outside[tick],
                                  eff_ahu, cooling)
        for _ in range(16):
            hot = np.nonzero(state.temps_c.max(axis=1)
                             > GPU_TEMP_THRESHOLD_C + 1e-9)[0]
            if len(hot) == 0:
                break
            self.loads[hot] *= THERMAL_THROTTLE_MULT
            mult[hot] *= THERMAL_THROTTLE_MULT
            thermal_capped.update(int(i) for i in hot)
            state = self.phys.compute(self.loads, self.t_outside[tick],
                                      eff_ahu, cooling)
        self.last_phys = state
        self._last_mult = mult

        if sc.record_snapshots:
            self.snapshots.append({
                "tick": tick, "loads": self.loads.copy(),
                "t_outside_c": float(self.t_outside[tick]),
                "eff_ahu_cfm": eff_ahu.copy(),
                "cooling_capacity": cooling,
                "watts": state.watts.copy(), "inlet_c": state.inlet_c.copy(),
                "temps_c": state.temps_c.copy(),
                "row_watts": state.row_watts.copy(),
                "aisle_cfm": state.aisle_cfm.copy()})

        # (7) metrics and history
        served = quality_tokens = 0.0
        for v in self.saas_live:
            dec = self._decision(v)
            sid = self.allocator.state.vm_server[v]
            cap = dec.goodput_tps * 60.0 * mult[self.phys.index[sid]]
            got = min(assigned.get(v, 0.0), cap)
            served += got
            violations += assigned.get(v, 0.0) - got
            if assigned.get(v, 0.0) - got > 1e-6:
                _dbg['clip'] = _dbg.get('clip', 0.0) + assigned.get(v, 0.0) - got
                _dbg.setdefault('clip_vms', {}).setdefault(v, [0.0, 0])
                _dbg['clip_vms'][v][0] += assigned.get(v, 0.0) - got
                _dbg['clip_vms'][v][1] += 1
                if mult[self.phys.index[sid]] < 0.999:
                    _dbg['clip_mult'] = _dbg.get('clip_mult', 0.0) + assigned.get(v, 0.0) - got
                if dec.transition_ticks > 0:
                    _dbg['clip_reload'] = _dbg.get('clip_reload', 0.0) + assigned.get(v, 0.0) - got
            quality_tokens += got * dec.profile.quality
        iaas_idx = [self.phys.index[self.allocator.state.vm_server[v]]
                    for v in self.iaas_live]
        depth = (float(np.mean([1.0 - mult[i] for i in iaas_idx]))
                 if iaas_idx else 0.0)
        m = self._m
        m["max_temp"].append(float(state.temps_c.max()))
        ri = int(np.argmax(state.row_watts))
        m["peak_row_w"].append(float(state.row_watts[ri]))
        m["peak_row_id"].append(self.phys.row_ids[ri])
        m["rows"].append(state.row_watts.copy())
        m["thermal"].append(len(thermal_capped))
        m["power"].append(len(power_capped))
        m["any"].append(len(thermal_capped | power_capped))
        m["occupied"].append(len(self.allocator.state.vm_server))
        m["iaas_depth"].append(depth)
        m["offered"].append(offered)
        m["served"].append(served)
        m["violations"].append(violations)
        m["quality"].append(quality_tokens)

        for v, rec in self.vm_rec.items():
            sid = self.allocator.state.vm_server[v]
            self.history.record(rec.scope_id, tick,
                                float(state.mean_load[self.phys.index[sid]]))

        if (self.place_aware and tick > 0 and tick % TICKS_PER_WEEK == 0):
            self.allocator.refresh_tiers()

    def run(self) -> MetricsReport:
        for t in range(self.sc.duration_ticks):
            self.step(t)
        m = self._m
        return MetricsReport(
            scenario=self.sc.name, policy=self.sc.policy, seed=self.sc.seed,
            n_ticks=self.sc.duration_ticks, n_rows=len(self.phys.row_ids),
            max_temp_c=np.array(m["max_temp"]),
            peak_row_watts=np.array(m["peak_row_w"]),
            peak_row_id=m["peak_row_id"],
            row_watts=np.array(m["rows"]),
            thermal_capped=np.array(m["thermal"], dtype=float),
            power_capped=np.array(m["power"], dtype=float),
            any_capped=np.array(m["any"], dtype=float),
            occupied=np.array(m["occupied"], dtype=float),
            iaas_depth=np.array(m["iaas_depth"]),
            saas_offered=np.array(m["offered"]),
            saas_served=np.array(m["served"]),
            saas_violations=np.array(m["violations"]),
            quality_tokens=np.array(m["quality"]),
            placement_failures=self.allocator.failures)


def run(scenario: Scenario) -> MetricsReport:
    """Run one scenario end to end; deterministic per (scenario, seed)."""
    return Engine(scenario).run()
