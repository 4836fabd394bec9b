"""VM placement.

Two policies behind one interface: a thermal/power-oblivious baseline
(first fit by ascending server id with only a capacity check) and the
aware policy, which applies three rules in order: a validator that drops
servers whose aisle airflow or row power would exceed predicted limits,
a thermal-tier preference (IaaS toward cold servers, SaaS toward warm
ones while the predicted GPU temperature stays under the threshold),
and a mix preference that keeps rows from concentrating one VM kind.
Every VM occupies a whole server. Placement failures are queued and
retried each tick.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .power import PowerCurve, nearest_rank_percentile
from .thermal import GPU_TEMP_THRESHOLD_C, ThermalProfileSet
from .topology import GPUS_PER_SERVER, Topology
from .workload import TICKS_PER_HOUR, TICKS_PER_WEEK, VmRecord

HOURS_PER_WEEK = 168
TIER_NAMES = ("cold", "medium", "warm")
MIX_NAMES = ("iaas-heavy", "balanced", "saas-heavy")


class PlacementError(RuntimeError):
    """Raised when no feasible server exists for a VM."""


# ---------------------------------------------------------------------------
# Load history and estimation
# ---------------------------------------------------------------------------

class LoadHistory:
    """Observed per-tick load fractions grouped by scope and hour-of-week.

    The scope is the IaaS customer or the SaaS endpoint; new VMs are
    predicted from whatever their scope's existing VMs have done.
    """

    def __init__(self):
        self._slots: dict[str, list[list[float]]] = {}
        self._first_tick: dict[str, int] = {}
        self._last_tick: dict[str, int] = {}

    def record(self, scope_id: str, tick: int, load: float) -> None:
        slots = self._slots.get(scope_id)
        if slots is None:
            slots = [[] for _ in range(HOURS_PER_WEEK)]
            self._slots[scope_id] = slots
            self._first_tick[scope_id] = tick
        slots[(tick // TICKS_PER_HOUR) % HOURS_PER_WEEK].append(float(load))
        self._last_tick[scope_id] = tick

    def span_ticks(self, scope_id: str) -> int:
        if scope_id not in self._first_tick:
            return 0
        return self._last_tick[scope_id] - self._first_tick[scope_id] + 1

    def peak(self, scope_id: str, percentile: float = 99.0) -> float | None:
        """Max over hour-of-week slots of the per-slot percentile load."""
        if self.span_ticks(scope_id) < TICKS_PER_WEEK:
            return None
        return max(nearest_rank_percentile(vals, percentile)
                   for vals in self._slots[scope_id] if vals)


def estimate_vm_load(history: LoadHistory, vm: VmRecord) -> float:
    """Predicted peak load fraction for a new VM.

    Uses the P99 hour-of-week template peak of the same customer or
    endpoint when at least a week of history exists; otherwise assumes
    peak load.
    """
    peak = history.peak(vm.scope_id)
    if peak is None:
        return 1.0
    return min(max(peak, 0.0), 1.0)


# ---------------------------------------------------------------------------
# Thermal tiers
# ---------------------------------------------------------------------------

def compute_tiers(topology: Topology, models: ThermalProfileSet,
                  t_outside_c: float = 25.0, dc_load: float = 0.5) -> dict[str, int]:
    """Partition servers into cold/medium/warm terciles by predicted idle
    GPU temperature (hottest GPU at zero load), sizes equal within one.
    """
    scores = []
    for sid in topology.server_ids:
        inlet = models.predict_inlet(sid, t_outside_c, dc_load)
        temp = max(models.predict_gpu_temp(sid, g, 0.0, inlet)
                   for g in range(GPUS_PER_SERVER))
        scores.append((temp, sid))
    scores.sort()
    n = len(scores)
    return {sid: min(i * 3 // n, 2) for i, (_, sid) in enumerate(scores)}


# ---------------------------------------------------------------------------
# Placement state
# ---------------------------------------------------------------------------

@dataclass
class PlacementState:
    """Occupancy plus the predicted-peak aggregates the validator guards.

    ``predicted_aisle_cfm`` and ``predicted_row_w`` track airflow and power
    with every server at its predicted peak load (0 when free), so the
    validator invariant is checkable at any time. ``effective_*`` limits
    default to the provisioned values and shrink during failures.
    """

    topology: Topology
    power_curves: dict[str, PowerCurve]
    occupancy: dict[str, str | None] = field(default_factory=dict)
    predicted_load: dict[str, float] = field(default_factory=dict)
    vm_server: dict[str, str] = field(default_factory=dict)
    vm_kind: dict[str, str] = field(default_factory=dict)
    thermal_tier: dict[str, int] = field(default_factory=dict)
    predicted_aisle_cfm: dict[str, float] = field(default_factory=dict)
    predicted_row_w: dict[str, float] = field(default_factory=dict)
    effective_ahu_cfm: dict[str, float] = field(default_factory=dict)
    effective_row_w: dict[str, float] = field(default_factory=dict)
    fan_cfm: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        topo = self.topology
        for sid in topo.server_ids:
            self.occupancy.setdefault(sid, None)
            self.predicted_load.setdefault(sid, 0.0)
            self.thermal_tier.setdefault(sid, 1)
        for a in topo.aisles:
            self.effective_ahu_cfm.setdefault(a.id, a.prov_ahu_cfm)
            self.predicted_aisle_cfm.setdefault(a.id, 0.0)
        for r in topo.rows:
            self.effective_row_w.setdefault(r.id, r.prov_power_w)
            self.predicted_row_w.setdefault(r.id, 0.0)
        # Idle baselines: a free server still draws idle power and idle fan flow.
        for s in topo.servers:
            self.predicted_row_w[topo.row_of_server(s.id)] += self._watts(s.id, 0.0)
            self.predicted_aisle_cfm[topo.aisle_of_server(s.id)] += self._cfm(s.id, 0.0)

    def _watts(self, sid: str, load: float) -> float:
        return self.power_curves[sid].watts(load)

    def _cfm(self, sid: str, load: float) -> float:
        return self.fan_cfm[sid](load) if sid in self.fan_cfm else 0.0

    def free_servers(self) -> list[str]:
        return [sid for sid in self.topology.server_ids if self.occupancy[sid] is None]

    def live_vms(self) -> list[str]:
        return list(self.vm_server)

    def row_mix(self, row_id: str, threshold: float = 0.6) -> str:
        """Mix tier of a row by occupied-server kind counts."""
        kinds = [self.vm_kind[self.occupancy[sid]]
                 for sid in self.topology.servers_in(row_id)
                 if self.occupancy[sid] is not None]
        if not kinds:
            return "balanced"
        iaas = kinds.count("iaas") / len(kinds)
        if iaas > threshold:
            return "iaas-heavy"
        if 1.0 - iaas > threshold:
            return "saas-heavy"
        return "balanced"

    def admit(self, vm: VmRecord, sid: str, load: float) -> None:
        if self.occupancy[sid] is not None:
            raise PlacementError(f"server {sid} already occupied")
        topo = self.topology
        self.predicted_row_w[topo.row_of_server(sid)] += (
            self._watts(sid, load) - self._watts(sid, 0.0))
        self.predicted_aisle_cfm[topo.aisle_of_server(sid)] += (
            self._cfm(sid, load) - self._cfm(sid, 0.0))
        self.occupancy[sid] = vm.vm_id
        self.predicted_load[sid] = load
        self.vm_server[vm.vm_id] = sid
        self.vm_kind[vm.vm_id] = vm.kind

    def release(self, vm_id: str) -> None:
        sid = self.vm_server.pop(vm_id)
        load = self.predicted_load[sid]
        topo = self.topology
        self.predicted_row_w[topo.row_of_server(sid)] -= (
            self._watts(sid, load) - self._watts(sid, 0.0))
        self.predicted_aisle_cfm[topo.aisle_of_server(sid)] -= (
            self._cfm(sid, load) - self._cfm(sid, 0.0))
        self.occupancy[sid] = None
        self.predicted_load[sid] = 0.0
        del self.vm_kind[vm_id]


# ---------------------------------------------------------------------------
# Allocator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AllocatorConfig:
    aware: bool = True                   # False selects the baseline policy
    mix_threshold: float = 0.6
    temp_threshold_c: float = GPU_TEMP_THRESHOLD_C
    # Conservative planning point for SaaS temperature screening.
    planning_outside_c: float = 32.0
    planning_dc_load: float = 0.8


class Allocator:
    """Single placement actor; owns the PlacementState and the retry queue."""

    def __init__(self, topology: Topology, models: ThermalProfileSet,
                 power_curves: dict[str, PowerCurve],
                 config: AllocatorConfig | None = None):
        self.topology = topology
        self.models = models
        self.config = config or AllocatorConfig()
        fans = {s.id: models.fan_curves[s.gpu_type].airflow_cfm
                for s in topology.servers}
        self.state = PlacementState(topology, power_curves, fan_cfm=fans)
        self.state.thermal_tier = compute_tiers(topology, models)
        self.pending: list[tuple[VmRecord, float]] = []
        self.log: list[dict] = []
        self.failures = 0

    def refresh_tiers(self, t_outside_c: float = 25.0, dc_load: float = 0.5) -> None:
        self.state.thermal_tier = compute_tiers(self.topology, self.models,
                                                t_outside_c, dc_load)

    # -- rules ---------------------------------------------------------------

    def filter_feasible(self, vm_load: float) -> list[str]:
        """Free servers that keep predicted aisle airflow and row power
        within their effective limits when this VM is added at its
        predicted load.
        """
        st = self.state
        topo = self.topology
        out = []
        for sid in st.free_servers():
            row = topo.row_of_server(sid)
            aisle = topo.aisle_of_server(sid)
            d_w = st._watts(sid, vm_load) - st._watts(sid, 0.0)
            d_cfm = st._cfm(sid, vm_load) - st._cfm(sid, 0.0)
            if (st.predicted_row_w[row] + d_w <= st.effective_row_w[row] + 1e-9
                    and st.predicted_aisle_cfm[aisle] + d_cfm
                    <= st.effective_ahu_cfm[aisle] + 1e-9):
                out.append(sid)
        return out

    def _saas_temp_ok(self, sid: str, vm_load: float) -> bool:
        cfg = self.config
        inlet = self.models.predict_inlet(sid, cfg.planning_outside_c,
                                          cfg.planning_dc_load)
        temp = max(self.models.predict_gpu_temp(sid, g, vm_load, inlet)
                   for g in range(GPUS_PER_SERVER))
        return temp <= cfg.temp_threshold_c

    def rank_candidates(self, vm: VmRecord, candidates: list[str],
                        vm_load: float) -> list[str]:
        """Order candidates by thermal-tier preference, then row mix,
        then ascending server id.
        """
        st = self.state
        topo = self.topology

        def key(sid: str):
            tier = st.thermal_tier[sid]
            if vm.kind == "iaas":
                demoted = 0
                pref = tier
            else:
                demoted = 0 if self._saas_temp_ok(sid, vm_load) else 1
                pref = 2 - tier
            mix = st.row_mix(topo.row_of_server(sid), self.config.mix_threshold)
            heavy = f"{vm.kind}-heavy"
            return (demoted, pref, 1 if mix == heavy else 0, sid)

        return sorted(candidates, key=key)

    # -- placement -----------------------------------------------------------

    def place_vm(self, vm: VmRecord, vm_load: float, tick: int) -> str | None:
        """Place one VM; returns the server id or None when infeasible
        (the VM is then queued for retry).
        """
        st = self.state
        if self.config.aware:
            candidates = self.filter_feasible(vm_load)
            trace = f"validator={len(candidates)}"
            if not candidates:
                self._log(tick, vm, None, trace + ";queued")
                self.pending.append((vm, vm_load))
                self.failures += 1
                return None
            ranked = self.rank_candidates(vm, candidates, vm_load)
            sid = ranked[0]
            tier = TIER_NAMES[st.thermal_tier[sid]]
            mix = st.row_mix(self.topology.row_of_server(sid),
                             self.config.mix_threshold)
            trace += f";tier={tier};mix={mix}"
        else:
            free = st.free_servers()
            if not free:
                self._log(tick, vm, None, "firstfit;queued")
                self.pending.append((vm, vm_load))
                self.failures += 1
                return None
            sid = free[0]
            trace = "firstfit"
        st.admit(vm, sid, vm_load)
        self._log(tick, vm, sid, trace)
        return sid

    def retry_pending(self, tick: int) -> list[tuple[VmRecord, str]]:
        """Retry queued VMs; returns (vm, server) for each success."""
        if not self.pending:
            return []
        queue, self.pending = self.pending, []
        placed = []
        for vm, load in queue:
            if tick >= vm.arrival_tick + vm.lifetime_ticks:
                continue       # expired before it could be placed
            sid = self.place_vm(vm, load, tick)
            if sid is not None:
                placed.append((vm, sid))
        return placed

    def release(self, vm_id: str) -> None:
        self.state.release(vm_id)

    def _log(self, tick: int, vm: VmRecord, sid: str | None, trace: str) -> None:
        self.log.append({"tick": tick, "vm_id": vm.vm_id,
                         "server_id": sid or "", "rule_trace": trace})
