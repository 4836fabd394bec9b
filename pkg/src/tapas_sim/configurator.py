"""Per-instance configuration control for SaaS VMs.

Each SaaS VM gets an InstanceBudget (its share of aisle airflow slack and
row power slack, plus a temperature ceiling below the global threshold)
and a ConfigProfile chosen by exhaustive scan: the goodput-maximizing
profile within budget, with quality reduction strictly a last resort and
guarded by the endpoint quality floor. Changes to tensor parallelism,
model size, or quantization require a model reload, which costs a
transition tick (the instance is unroutable meanwhile) and is debounced
with a two-tick hysteresis in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

from .power import PowerCurve
from .thermal import FanCurve, GPU_TEMP_THRESHOLD_C, ThermalProfileSet
from .topology import GPUS_PER_SERVER, Topology
from .workload import ConfigProfile

TEMP_SAFETY_MARGIN_C = 2.0
HYSTERESIS_TICKS = 2
RESTORE_HYSTERESIS_TICKS = 10
SWITCH_DEADBAND = 0.05


class ConfiguratorExhausted(RuntimeError):
    """No profile fits the budget; the engine escalates to capping."""


@dataclass(frozen=True)
class InstanceBudget:
    max_airflow_cfm: float
    max_temp_c: float
    max_power_w: float
    valid_from_tick: int = 0

    def __post_init__(self):
        if min(self.max_airflow_cfm, self.max_temp_c, self.max_power_w) <= 0:
            raise ValueError("budgets must be > 0")
        if self.max_temp_c > GPU_TEMP_THRESHOLD_C:
            raise ValueError("temp budget above global threshold")


@dataclass
class ConfigDecision:
    profile: ConfigProfile
    transition_ticks: int = 0
    previous: ConfigProfile | None = None

    @property
    def routable(self) -> bool:
        return self.transition_ticks == 0

    @property
    def goodput_tps(self) -> float:
        return 0.0 if self.transition_ticks > 0 else self.profile.goodput_tps


# ---------------------------------------------------------------------------
# Budgets
# ---------------------------------------------------------------------------

def compute_budgets(topology: Topology, vm_server: dict[str, str],
                    vm_kind: dict[str, str], server_watts: dict[str, float],
                    server_cfm: dict[str, float],
                    effective_ahu_cfm: dict[str, float],
                    effective_row_w: dict[str, float],
                    demand_weight: dict[str, float], tick: int,
                    safety_margin_c: float = TEMP_SAFETY_MARGIN_C,
                    ) -> dict[str, InstanceBudget]:
    """Budgets for every SaaS VM.

    Each row's SaaS power pool (the effective row limit minus what the
    row's non-SaaS servers draw) and each aisle's SaaS airflow pool are
    split among that row's/aisle's SaaS VMs proportionally to demand
    weight, with an equal split when all weights are zero. Splitting the
    whole pool rather than incremental slack keeps the division fair: a
    budget anchored at the VM's own current draw would let an instance
    that grabbed a big profile early keep its watts forever while an
    equally loaded newcomer never collects enough slack to grow.
    """
    saas = [v for v, k in vm_kind.items() if k == "saas" and v in vm_server]
    by_row: dict[str, list[str]] = {}
    by_aisle: dict[str, list[str]] = {}
    for v in saas:
        sid = vm_server[v]
        by_row.setdefault(topology.row_of_server(sid), []).append(v)
        by_aisle.setdefault(topology.aisle_of_server(sid), []).append(v)

    def shares(vms: list[str]) -> dict[str, float]:
        total = sum(demand_weight.get(v, 0.0) for v in vms)
        if total <= 0:
            return {v: 1.0 / len(vms) for v in vms}
        return {v: demand_weight.get(v, 0.0) / total for v in vms}

    power_budget: dict[str, float] = {}
    for row_id, vms in by_row.items():
        row_total = sum(server_watts.get(s, 0.0)
                        for s in topology.servers_in(row_id))
        saas_draw = sum(server_watts.get(vm_server[v], 0.0) for v in vms)
        pool = effective_row_w[row_id] - (row_total - saas_draw)
        for v, share in shares(vms).items():
            power_budget[v] = pool * share

    cfm_budget: dict[str, float] = {}
    for aisle_id, vms in by_aisle.items():
        demand = sum(server_cfm.get(s, 0.0)
                     for s in topology.servers_in(aisle_id))
        saas_cfm = sum(server_cfm.get(vm_server[v], 0.0) for v in vms)
        pool = effective_ahu_cfm[aisle_id] - (demand - saas_cfm)
        for v, share in shares(vms).items():
            cfm_budget[v] = pool * share

    temp = GPU_TEMP_THRESHOLD_C - safety_margin_c
    return {v: InstanceBudget(max_airflow_cfm=max(cfm_budget[v], 1.0),
                              max_temp_c=temp,
                              max_power_w=max(power_budget[v], 1.0),
                              valid_from_tick=tick)
            for v in saas}


# ---------------------------------------------------------------------------
# Profile evaluation against a concrete server
# ---------------------------------------------------------------------------

class ProfileEvaluator:
    """Projects a profile's temperature, power, and airflow on one server.

    A profile with tensor parallelism ``tp`` loads its first ``tp`` GPUs at
    ``gpu_intensity`` scaled by the expected utilization, and leaves the
    rest idle; power and fan speed follow the server-mean load. Evaluating
    at utilization rather than full tilt matters for budget compliance: an
    instance that will sit near idle draws near-idle power no matter how
    hungry its profile looks on paper.
    """

    def __init__(self, models: ThermalProfileSet, power_curve: PowerCurve,
                 fan_curve: FanCurve, server_id: str, inlet_c: float):
        self.models = models
        self.power_curve = power_curve
        self.fan_curve = fan_curve
        self.server_id = server_id
        self.inlet_c = inlet_c
        self._temp_cache: dict[tuple, float] = {}

    def temp_c(self, p: ConfigProfile, utilization: float = 1.0) -> float:
        key = (p.profile_id, round(utilization, 4))
        cached = self._temp_cache.get(key)
        if cached is not None:
            return cached
        load = p.gpu_intensity * min(max(utilization, 0.0), 1.0)
        t = max(self.models.predict_gpu_temp(
                    self.server_id, g, load if g < p.tp else 0.0,
                    self.inlet_c)
                for g in range(GPUS_PER_SERVER))
        self._temp_cache[key] = t
        return t

    def watts(self, p: ConfigProfile, utilization: float = 1.0) -> float:
        return self.power_curve.watts(
            p.mean_load * min(max(utilization, 0.0), 1.0))

    def cfm(self, p: ConfigProfile, utilization: float = 1.0) -> float:
        return self.fan_curve.airflow_cfm(
            p.mean_load * min(max(utilization, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def _clamp_demand(table: list[ConfigProfile], demand_tps: float) -> float:
    # No profile class is asked to beat the best full-quality goodput:
    # past that point the instance is simply saturated, and trading
    # quality for throughput is not on the table.
    best_full = max((p.goodput_tps for p in table if p.quality >= 1.0),
                    default=0.0)
    return min(demand_tps, best_full) if best_full > 0.0 else demand_tps


def _serving_utilization(p: ConfigProfile, demand_tps: float) -> float:
    if demand_tps <= 0.0 or p.goodput_tps <= 0.0:
        return 0.0
    return min(demand_tps / p.goodput_tps, 1.0)


def _fits_budget(p: ConfigProfile, budget: InstanceBudget,
                 evaluator: ProfileEvaluator, demand_tps: float) -> bool:
    u = _serving_utilization(p, demand_tps)
    return (evaluator.watts(p, u) <= budget.max_power_w
            and evaluator.temp_c(p, u) <= budget.max_temp_c
            and evaluator.cfm(p, u) <= budget.max_airflow_cfm)


def quality_needed(table: list[ConfigProfile], budget: InstanceBudget,
                   evaluator: ProfileEvaluator, demand_tps: float) -> float:
    """Highest quality class that can serve the demand within budget.

    Returns the quality of the best class containing a profile that both
    keeps up with ``demand_tps`` and fits the budget, or the lowest class
    in the table when no class can keep up (the instance then needs every
    bit of quality headroom it can get).
    """
    if not table:
        raise ConfiguratorExhausted("empty profile table")
    demand_tps = _clamp_demand(table, demand_tps)
    classes = sorted({p.quality for p in table}, reverse=True)
    for q in classes:
        for p in table:
            if (p.quality == q and p.goodput_tps >= demand_tps - 1e-9
                    and _fits_budget(p, budget, evaluator, demand_tps)):
                return q
    return classes[-1]


def slo_floor_class(table: list[ConfigProfile], slo: float) -> float:
    """Lowest quality class that on its own satisfies the endpoint SLO.

    Served quality is token-weighted, and routing overflow concentrates
    traffic on the members with the largest spare goodput, which are
    exactly the reduced-quality ones. A member running below this class
    can therefore drag the endpoint's weighted average under the SLO even
    when the plain average of the floors holds it, so per-member floors
    are clamped here. Returns the highest class when none reaches the SLO.
    """
    if not table:
        raise ConfiguratorExhausted("empty profile table")
    classes = sorted({p.quality for p in table})
    for q in classes:
        if q >= slo - 1e-9:
            return q
    return classes[-1]


def allocate_quality_floors(need: dict[str, float], slo: float,
                            weight: dict[str, float] | None = None,
                            ) -> dict[str, float]:
    """Split an endpoint's quality headroom among its members by need.

    ``need`` maps each member VM to the quality class it needs to drop to
    in order to keep serving (from quality_needed), and ``weight`` to its
    expected share of the endpoint's traffic (equal when omitted). The
    endpoint can give away ``(1 - slo) * total_weight`` of traffic-weighted
    quality while its average served quality stays at the SLO; that
    headroom goes to the neediest members first, so one constrained
    instance cannot be starved of headroom by peers that merely shaved a
    few watts. Returns each member's quality floor; the weighted floor
    average never sinks below the SLO.
    """
    if weight is None:
        weight = {v: 1.0 for v in need}
    total = sum(weight.get(v, 0.0) for v in need)
    if total <= 0.0:
        weight = {v: 1.0 for v in need}
        total = float(len(need))
    headroom = (1.0 - slo) * total
    floors: dict[str, float] = {}
    for vm in sorted(need, key=lambda v: (need[v], v)):
        w = weight.get(vm, 0.0)
        if w <= 0.0:
            floors[vm] = need[vm]
            continue
        grant = min(1.0 - need[vm], max(headroom, 0.0) / w)
        floors[vm] = 1.0 - grant
        headroom -= grant * w
    return floors


def select_config(table: list[ConfigProfile], budget: InstanceBudget,
                  evaluator: ProfileEvaluator, current: ConfigProfile,
                  min_quality: float, demand_tps: float = 0.0) -> ConfigProfile:
    """Lowest-power profile that serves the projected demand within budget.

    Each profile is evaluated at the utilization it would run at to serve
    ``demand_tps``. Profiles that keep up with demand are strictly
    preferred; among those, full quality beats reduced quality, so quality
    is surrendered only when no full-quality profile can both fit the
    budget and keep up, and never below ``min_quality`` (the level that
    keeps the endpoint's average quality at its SLO). Within the winning
    quality class the least-power profile is chosen, so lightly loaded
    instances drop to cheaper frequency and batch settings. When nothing
    keeps up at all, the goodput-maximizing profile at or above the
    quality floor wins (best effort), higher quality breaking goodput
    ties. Ties break toward no reload, keeping the
    current profile, then profile id. Raises ConfiguratorExhausted when
    nothing fits at all.
    """
    if not table:
        raise ConfiguratorExhausted("empty profile table")

    demand_tps = _clamp_demand(table, demand_tps)

    def fits(p: ConfigProfile) -> bool:
        return _fits_budget(p, budget, evaluator, demand_tps)

    # Reload-free candidates (frequency and batch moves) come first: a
    # reload takes the instance out of rotation, which costs more than a
    # small watts edge is worth. Within a reload class, profiles that keep
    # up with a fixed demand have server watts monotone in mean_load /
    # goodput (the per-token load), so walking candidates in that order
    # and taking the first fit yields the least-power feasible profile
    # without evaluating the whole table.
    def pref(p: ConfigProfile) -> tuple:
        return (p.reload_cost_ticks if p.needs_reload_from(current) else 0,
                p.mean_load / p.goodput_tps if p.goodput_tps > 0 else 0.0,
                p.profile_id != current.profile_id, p.profile_id)

    serving = [p for p in table if p.goodput_tps >= demand_tps - 1e-9]
    for p in sorted((p for p in serving if p.quality >= 1.0), key=pref):
        if fits(p):
            return p
    reduced = [p for p in serving if min_quality <= p.quality < 1.0]
    for p in sorted(reduced, key=lambda p: (-p.quality,) + pref(p)):
        if fits(p):
            return p
    # Nothing serves demand within budget: best effort. Throughput beats
    # quality here; a full-quality profile trickling tokens loses more
    # service than a floor-quality profile that keeps the queue moving,
    # and the quality floor already bounds how far down this can reach.
    for p in sorted((p for p in table if p.quality >= min_quality),
                    key=lambda p: (-p.goodput_tps, -p.quality) + pref(p)):
        if fits(p):
            return p
    raise ConfiguratorExhausted(
        f"no profile fits budget {budget} at quality >= {min_quality:.2f}")


def apply_config(decision: ConfigDecision, new: ConfigProfile) -> ConfigDecision:
    """Transition to a new profile; reloads cost transition ticks."""
    if new.profile_id == decision.profile.profile_id:
        return decision
    cost = new.reload_cost_ticks if new.needs_reload_from(decision.profile) else 0
    return ConfigDecision(profile=new, transition_ticks=cost,
                          previous=decision.profile)


# ---------------------------------------------------------------------------
# Per-VM controller
# ---------------------------------------------------------------------------

@dataclass
class _VmCtl:
    decision: ConfigDecision
    pending_id: str | None = None    # reload target waiting out hysteresis
    streak: int = 0


class Configurator:
    """Runs the per-VM control loop and keeps the decision log.

    Decisions are cached by a bucketed (budget, demand, current profile)
    key; identical situations on consecutive ticks skip the scan.
    """

    def __init__(self, table: list[ConfigProfile], nominal: ConfigProfile,
                 hysteresis_ticks: int = HYSTERESIS_TICKS,
                 restore_hysteresis_ticks: int = RESTORE_HYSTERESIS_TICKS):
        self.table = table
        self.nominal = nominal
        self.hysteresis = hysteresis_ticks
        self.restore_hysteresis = restore_hysteresis_ticks
        self._vms: dict[str, _VmCtl] = {}
        self._full_goodput_cap = max(
            (p.goodput_tps for p in table if p.quality >= 1.0), default=0.0)
        self._cache: dict[tuple, str] = {}
        self._by_id = {p.profile_id: p for p in table}
        self.log: list[dict] = []
        self.exhausted_vms: set[str] = set()

    def add_vm(self, vm_id: str) -> ConfigDecision:
        ctl = _VmCtl(decision=ConfigDecision(profile=self.nominal))
        self._vms[vm_id] = ctl
        return ctl.decision

    def remove_vm(self, vm_id: str) -> None:
        self._vms.pop(vm_id, None)
        self.exhausted_vms.discard(vm_id)

    def decision(self, vm_id: str) -> ConfigDecision:
        return self._vms[vm_id].decision

    def routable_goodput_tps(self, vm_id: str) -> float:
        """Goodput the router can count on for the coming tick.

        A pending downgrade fires between routing and enforcement, so
        tokens routed against the outgoing profile would only be clipped;
        advertise the smaller of the current and pending rates instead.
        """
        ctl = self._vms[vm_id]
        tps = ctl.decision.goodput_tps
        if ctl.pending_id is not None:
            tps = min(tps, self._by_id[ctl.pending_id].goodput_tps)
        return tps

    def _cache_key(self, budget: InstanceBudget, demand_tps: float,
                   current: ConfigProfile, min_quality: float,
                   evaluator: ProfileEvaluator) -> tuple:
        return (evaluator.server_id, round(evaluator.inlet_c * 2.0),
                round(budget.max_power_w / 100.0),
                round(budget.max_airflow_cfm / 50.0),
                round(budget.max_temp_c * 2.0),
                round(demand_tps / 50.0),
                round(min_quality, 2),
                current.profile_id)

    def step(self, vm_id: str, budget: InstanceBudget,
             evaluator: ProfileEvaluator, demand_tps: float,
             min_quality: float, tick: int,
             failure_active: bool = False,
             allow_reload: bool = True) -> ConfigDecision:
        """Advance one VM's controller by a tick and return its decision."""
        ctl = self._vms[vm_id]
        if ctl.decision.transition_ticks > 0:
            ctl.decision.transition_ticks -= 1
            return ctl.decision
        current = ctl.decision.profile
        key = self._cache_key(budget, demand_tps, current, min_quality,
                              evaluator)
        target_id = self._cache.get(key)
        if target_id is None:
            try:
                target_id = select_config(self.table, budget, evaluator,
                                          current, min_quality,
                                          demand_tps).profile_id
                self.exhausted_vms.discard(vm_id)
            except ConfiguratorExhausted:
                self.exhausted_vms.add(vm_id)
                ctl.pending_id, ctl.streak = None, 0
                return ctl.decision
            self._cache[key] = target_id
        target = self._by_id[target_id]
        if self._within_deadband(target, current, budget, evaluator,
                                 demand_tps):
            ctl.pending_id, ctl.streak = None, 0
            return ctl.decision
        return self._transition(ctl, vm_id, target, tick, failure_active,
                                allow_reload)

    def _within_deadband(self, target: ConfigProfile, current: ConfigProfile,
                         budget: InstanceBudget, evaluator: ProfileEvaluator,
                         demand_tps: float) -> bool:
        """True when a same-quality switch is not worth its churn.

        While the current profile still serves demand within budget, a
        sideways move has to save a meaningful fraction of power; otherwise
        small budget wobble would flip the profile every few ticks.
        """
        if (target.profile_id == current.profile_id
                or target.quality != current.quality
                or current.goodput_tps <= 0):
            return False
        d = demand_tps
        if self._full_goodput_cap > 0:
            d = min(d, self._full_goodput_cap)
        if current.goodput_tps < d or target.goodput_tps < d:
            return False
        u = min(d / current.goodput_tps, 1.0)
        w_cur = evaluator.watts(current, u)
        if (w_cur > budget.max_power_w
                or evaluator.temp_c(current, u) > budget.max_temp_c
                or evaluator.cfm(current, u) > budget.max_airflow_cfm):
            return False
        u_t = min(d / target.goodput_tps, 1.0)
        return evaluator.watts(target, u_t) > (1.0 - SWITCH_DEADBAND) * w_cur

    def _transition(self, ctl: _VmCtl, vm_id: str, target: ConfigProfile,
                    tick: int, failure_active: bool,
                    allow_reload: bool = True) -> ConfigDecision:
        current = ctl.decision.profile

        if target.profile_id == current.profile_id:
            ctl.pending_id, ctl.streak = None, 0
            return ctl.decision

        downgrade = target.quality < current.quality or (
            target.quality == current.quality
            and target.goodput_tps < current.goodput_tps)

        # Quality comes back only after the emergency clears. Restoring
        # mid-failure re-creates the very draw that forced the downgrade,
        # and each round trip costs a reload; same-quality resizing stays
        # allowed so a starved instance can still grow its goodput.
        if failure_active and target.quality > current.quality:
            ctl.pending_id, ctl.streak = None, 0
            return ctl.decision

        # Debounce every change: require the same target on consecutive
        # ticks before acting, so single-tick budget or demand wobble does
        # not flip the profile back and forth. Restores wait much longer
        # than downgrades; reacting to pressure must be fast, but growing
        # back the moment a constrained row shows a sliver of slack sets
        # up a downgrade-restore limit cycle around the limit.
        if ctl.pending_id == target.profile_id:
            ctl.streak += 1
        else:
            ctl.pending_id, ctl.streak = target.profile_id, 1
        wait = self.hysteresis if downgrade else self.restore_hysteresis
        if ctl.streak < wait:
            return ctl.decision
        if not allow_reload and target.needs_reload_from(current):
            # No reload slot free on this endpoint; hold the streak and
            # retry once a peer finishes, so members reload in waves
            # instead of taking the whole endpoint out of rotation.
            return ctl.decision
        ctl.pending_id, ctl.streak = None, 0
        trigger = ("failure" if failure_active and downgrade
                   else "budget" if downgrade else "restore")
        ctl.decision = apply_config(ctl.decision, target)
        self.log.append({"tick": tick, "vm_id": vm_id,
                         "profile_id": target.profile_id, "trigger": trigger,
                         "transition_ticks": ctl.decision.transition_ticks})
        return ctl.decision
