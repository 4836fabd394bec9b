"""SaaS request routing.

The aware router filters endpoint VMs through a periodically refreshed
risk cache (airflow, power, and thermal violation flags with a headroom
margin) and then orders choices as affinity first, consolidation second,
spread last. When every VM is flagged it falls back to the one with the
largest minimum slack, since requests must land somewhere until the
configurator or capping reacts. The baseline router is plain per-endpoint
round robin.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .power import PowerCurve
from .thermal import GPU_TEMP_THRESHOLD_C, ThermalProfileSet
from .topology import GPUS_PER_SERVER, Topology
from .workload import RequestBatch

RISK_REFRESH_TICKS = 5


class RoutingError(RuntimeError):
    """Raised when an endpoint has no live VMs to route to."""


# ---------------------------------------------------------------------------
# Risk cache
# ---------------------------------------------------------------------------

@dataclass
class RiskCache:
    """Per-VM violation-risk flags plus the slack used for fallback.

    The ``row_*`` and ``vm_span_w`` fields support the router's within-tick
    row-power projection: ``row_base_w`` is each row's draw with every SaaS
    VM idle, ``row_cap_w`` the headroom-adjusted ceiling the router fills
    rows up to, and ``vm_span_w`` a VM's server watts span from idle to
    full. When these are empty the projection check is disabled.
    """

    tick: int
    refresh_interval: int = RISK_REFRESH_TICKS
    airflow_risk: dict[str, bool] = field(default_factory=dict)
    power_risk: dict[str, bool] = field(default_factory=dict)
    thermal_risk: dict[str, bool] = field(default_factory=dict)
    min_slack: dict[str, float] = field(default_factory=dict)
    row_of: dict[str, str] = field(default_factory=dict)
    row_base_w: dict[str, float] = field(default_factory=dict)
    row_cap_w: dict[str, float] = field(default_factory=dict)
    vm_span_w: dict[str, float] = field(default_factory=dict)

    def flagged(self, vm_id: str) -> bool:
        return (self.airflow_risk.get(vm_id, False)
                or self.power_risk.get(vm_id, False)
                or self.thermal_risk.get(vm_id, False))

    def is_stale(self, now: int) -> bool:
        return now - self.tick >= self.refresh_interval


def refresh_risk(topology: Topology, models: ThermalProfileSet,
                 power_curves: dict[str, PowerCurve],
                 vm_server: dict[str, str], vm_kind: dict[str, str],
                 loads: dict[str, float],
                 effective_ahu_cfm: dict[str, float],
                 effective_row_w: dict[str, float],
                 t_outside_c: float, dc_load: float, tick: int,
                 margin: float = 0.05, power_margin: float | None = None,
                 temp_threshold_c: float = GPU_TEMP_THRESHOLD_C) -> RiskCache:
    """Recompute risk flags from a load snapshot.

    A VM is at risk if its aisle's projected airflow demand, its row's
    projected power, or its own projected hottest-GPU temperature comes
    within the headroom margin of the corresponding effective limit. The
    deeper ``power_margin`` sets the ceiling the router levels row power
    up to within a tick (see RiskCache).
    """
    if power_margin is None:
        power_margin = margin
    aisle_demand = {a.id: 0.0 for a in topology.aisles}
    row_power = {r.id: 0.0 for r in topology.rows}
    row_base = {r.id: 0.0 for r in topology.rows}
    saas_servers = {sid for vm, sid in vm_server.items()
                    if vm_kind.get(vm) == "saas"}
    for s in topology.servers:
        load = loads.get(s.id, 0.0)
        fan = models.fan_curves[s.gpu_type]
        aisle_demand[topology.aisle_of_server(s.id)] += fan.airflow_cfm(load)
        row = topology.row_of_server(s.id)
        row_power[row] += power_curves[s.id].watts(load)
        row_base[row] += power_curves[s.id].watts(
            0.0 if s.id in saas_servers else load)

    cache = RiskCache(tick=tick)
    cache.row_base_w = row_base
    cache.row_cap_w = {r: (1.0 - power_margin) * effective_row_w[r]
                       for r in row_base}
    for vm_id, sid in vm_server.items():
        if vm_kind.get(vm_id) != "saas":
            continue
        aisle = topology.aisle_of_server(sid)
        row = topology.row_of_server(sid)
        ahu_lim = effective_ahu_cfm[aisle]
        pow_lim = effective_row_w[row]
        load = loads.get(sid, 0.0)
        inlet = models.predict_inlet(sid, t_outside_c, dc_load)
        temp = max(models.predict_gpu_temp(sid, g, load, inlet)
                   for g in range(GPUS_PER_SERVER))
        cache.airflow_risk[vm_id] = aisle_demand[aisle] > (1.0 - margin) * ahu_lim
        cache.power_risk[vm_id] = row_power[row] > (1.0 - margin) * pow_lim
        cache.thermal_risk[vm_id] = temp > (1.0 - margin) * temp_threshold_c
        cache.min_slack[vm_id] = min(
            (ahu_lim - aisle_demand[aisle]) / ahu_lim if ahu_lim > 0 else 0.0,
            (pow_lim - row_power[row]) / pow_lim if pow_lim > 0 else 0.0,
            (temp_threshold_c - temp) / temp_threshold_c)
        cache.row_of[vm_id] = row
        curve = power_curves[sid]
        cache.vm_span_w[vm_id] = curve.full_w - curve.idle_w
    return cache


def filter_routable(endpoint_vms: list[str], cache: RiskCache) -> tuple[list[str], bool]:
    """Drop risk-flagged VMs; when all are flagged return the least-risky
    set (degraded mode): the VMs with the fewest flags set, so a
    datacenter-wide emergency degrades routing quality without funnelling
    an endpoint's whole load through one instance. Second element is the
    fallback indicator.
    """
    if not endpoint_vms:
        raise RoutingError("endpoint has no live VMs")
    ok = [v for v in endpoint_vms if not cache.flagged(v)]
    if ok:
        return ok, False

    def flags(v: str) -> int:
        return (int(cache.airflow_risk.get(v, False))
                + int(cache.power_risk.get(v, False))
                + int(cache.thermal_risk.get(v, False)))

    least = min(flags(v) for v in endpoint_vms)
    pool = [v for v in endpoint_vms if flags(v) == least]
    pool.sort(key=lambda v: (-cache.min_slack.get(v, 0.0), v))
    return pool, True


# ---------------------------------------------------------------------------
# Affinity
# ---------------------------------------------------------------------------

class AffinityTable:
    """Bounded LRU map from customer affinity key to last-serving VM."""

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._map: OrderedDict[str, str] = OrderedDict()

    def get(self, key: str) -> str | None:
        vm = self._map.get(key)
        if vm is not None:
            self._map.move_to_end(key)
        return vm

    def put(self, key: str, vm_id: str) -> None:
        self._map[key] = vm_id
        self._map.move_to_end(key)
        while len(self._map) > self.capacity:
            self._map.popitem(last=False)

    def forget_vm(self, vm_id: str) -> None:
        for key in [k for k, v in self._map.items() if v == vm_id]:
            del self._map[key]

    def __len__(self) -> int:
        return len(self._map)


# ---------------------------------------------------------------------------
# Router
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RouterConfig:
    aware: bool = True
    margin: float = 0.05
    # The power flag trips well below the row limit so consolidation levels
    # row power across the floor before capping would have to act; thermal
    # and airflow keep the tighter default headroom.
    power_margin: float = 0.30
    refresh_interval: int = RISK_REFRESH_TICKS
    discrepancy_fraction: float = 0.10   # early refresh trigger
    affinity_capacity: int = 4096


class Router:
    """Routes request batches for all endpoints against a shared snapshot."""

    def __init__(self, config: RouterConfig | None = None):
        self.config = config or RouterConfig()
        self.affinity: dict[str, AffinityTable] = {}
        self._rr: dict[str, int] = {}
        self.log: list[dict] = []
        self.log_enabled = True
        self._routable_memo: dict = {}
        self._row_tick = -1
        self._row_w: dict[str, float] = {}

    def _table(self, endpoint_id: str) -> AffinityTable:
        if endpoint_id not in self.affinity:
            self.affinity[endpoint_id] = AffinityTable(self.config.affinity_capacity)
        return self.affinity[endpoint_id]

    def forget_vm(self, vm_id: str) -> None:
        for table in self.affinity.values():
            table.forget_vm(vm_id)

    def route(self, batch: RequestBatch, endpoint_vms: list[str],
              cache: RiskCache, assigned_tokens: dict[str, float],
              goodput_tokens: dict[str, float], tick: int) -> str:
        """Pick a VM for one batch and update the affinity table.

        ``assigned_tokens``/``goodput_tokens`` are this tick's running
        token assignments and per-VM capacities (tokens per tick).
        """
        if not endpoint_vms:
            raise RoutingError(f"endpoint {batch.endpoint_id} has no live VMs")
        if not self.config.aware:
            i = self._rr.get(batch.endpoint_id, 0)
            vm = sorted(endpoint_vms)[i % len(endpoint_vms)]
            self._rr[batch.endpoint_id] = i + 1
            if self.log_enabled:
                self._log(tick, batch, vm, "roundrobin")
            return vm

        # The routable set is identical for every batch of one endpoint
        # within a tick, so memoize it per (tick, endpoint, snapshot).
        memo_key = (tick, batch.endpoint_id, id(cache), len(endpoint_vms))
        memo = self._routable_memo
        if memo.get("key") == memo_key:
            routable, degraded = memo["value"]
        else:
            routable, degraded = filter_routable(endpoint_vms, cache)
            self._routable_memo = {"key": memo_key, "value": (routable, degraded)}

        def spare(v: str) -> float:
            return goodput_tokens.get(v, 0.0) - assigned_tokens.get(v, 0.0)

        # Within-tick row-power projection: a candidate is acceptable only
        # if its row, with this tick's assignments so far plus this batch,
        # stays under the headroom-adjusted ceiling. This is what keeps a
        # single cool row from being swamped between cache refreshes.
        if tick != self._row_tick:
            self._row_tick = tick
            self._row_w = {}

        def batch_w(v: str) -> float:
            cap = goodput_tokens.get(v, 0.0)
            if cap <= 0.0:
                return 0.0
            return cache.vm_span_w.get(v, 0.0) * batch.tokens / cap

        def row_slack(v: str) -> float:
            row = cache.row_of.get(v)
            limit = cache.row_cap_w.get(row)
            if limit is None:
                return 0.0
            return limit - (cache.row_base_w.get(row, 0.0)
                            + self._row_w.get(row, 0.0) + batch_w(v))

        def row_ok(v: str) -> bool:
            return row_slack(v) >= 0.0

        table = self._table(batch.endpoint_id)
        hit = table.get(batch.affinity_key)
        if hit in routable and spare(hit) >= batch.tokens and row_ok(hit):
            chosen, reason = hit, "affinity"
        else:
            with_spare = [v for v in routable if spare(v) >= batch.tokens]
            pool = [v for v in with_spare if row_ok(v)]
            if pool:
                # Consolidate: most-loaded VM that still fits the batch;
                # ties go to the VM with the most constraint slack so
                # consolidation gravitates toward low-risk (cool) servers.
                chosen = max(pool,
                             key=lambda v: (assigned_tokens.get(v, 0.0),
                                            cache.min_slack.get(v, 0.0), v))
                reason = "consolidate"
            elif with_spare:
                # Every candidate row is past its ceiling: spill to the
                # least-over row instead of piling onto one VM, so the
                # overshoot levels out across rows.
                chosen = max(with_spare,
                             key=lambda v: (row_slack(v),
                                            cache.min_slack.get(v, 0.0), v))
                reason = "consolidate"
            else:
                # No routable candidate has room for the whole batch.
                # Widen to every live member, flagged or not: risk flags
                # steer load toward cooler rows but never justify clipping
                # tokens a flagged instance could serve, and the physics
                # capping still polices the real limits. Among those with
                # room, or failing that anyone, take the largest remaining
                # spare rather than the least-assigned VM: member
                # capacities differ by an order of magnitude once the
                # configurator has downsized some instances, and
                # equalizing tokens would drown the small ones.
                widened = [v for v in endpoint_vms
                           if spare(v) >= batch.tokens]
                pool = (widened
                        or [v for v in routable if row_ok(v)] or routable)
                chosen = max(pool,
                             key=lambda v: (spare(v),
                                            cache.min_slack.get(v, 0.0), v))
                reason = "spread"
        if degraded:
            reason = "fallback"
        row = cache.row_of.get(chosen)
        if row is not None:
            self._row_w[row] = self._row_w.get(row, 0.0) + batch_w(chosen)
        table.put(batch.affinity_key, chosen)
        if self.log_enabled:
            self._log(tick, batch, chosen, reason)
        return chosen

    def _log(self, tick: int, batch: RequestBatch, vm: str, reason: str) -> None:
        self.log.append({"tick": tick, "endpoint": batch.endpoint_id,
                         "batch_tokens": round(batch.tokens, 3),
                         "chosen_vm": vm, "reason": reason})
