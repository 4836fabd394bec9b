"""Slow, independent reference implementations used only by the tests.

Everything here trades speed for obviousness: plain Python loops, scalar
model evaluation, and exhaustive enumeration. The production code paths
(vectorized physics, incremental placement aggregates, the ordered
configuration scan) are checked against these on small instances.
"""

from __future__ import annotations

import math

from .configurator import ConfiguratorExhausted, InstanceBudget
from .power import PowerCurve
from .thermal import (RECIRCULATION_C_PER_10PCT, ThermalProfileSet,
                      recirculation_penalty_c)
from .topology import GPUS_PER_SERVER, Topology
from .workload import ConfigProfile


# ---------------------------------------------------------------------------
# Physics
# ---------------------------------------------------------------------------

def recompute_physics(topology: Topology, profiles: ThermalProfileSet,
                      power_curves: dict[str, PowerCurve],
                      loads, t_outside_c: float, eff_ahu_cfm: dict[str, float],
                      cooling_capacity: float = 1.0,
                      delta_t_cooling_c: float = 10.0) -> dict:
    """Scalar recomputation of one physics step from first principles.

    ``loads`` maps server id to a sequence of 8 per-GPU load fractions,
    ``eff_ahu_cfm`` maps aisle id to its effective AHU supply. Returns
    per-server watts, fan cfm, inlet and GPU temperatures plus the row
    power and aisle airflow sums, all as plain dicts.
    """
    sids = list(topology.server_ids)
    mean_load = {}
    watts = {}
    for sid in sids:
        gl = [min(max(float(x), 0.0), 1.0) for x in loads[sid]]
        mean_load[sid] = sum(gl) / len(gl)
        watts[sid] = power_curves[sid].watts(mean_load[sid])
    dc_load = min(max(sum(watts[s] for s in sids) / topology.total_tdp_w(),
                      0.0), 1.0)

    cfm = {}
    for sid in sids:
        fc = profiles.fan_curves[topology.server(sid).gpu_type]
        cfm[sid] = fc.airflow_cfm(mean_load[sid])

    aisle_cfm = {a.id: 0.0 for a in topology.aisles}
    for sid in sids:
        aisle_cfm[topology.aisle_of_server(sid)] += cfm[sid]

    inlet = {}
    for sid in sids:
        t = profiles.predict_inlet(sid, t_outside_c, dc_load)
        if cooling_capacity < 1.0:
            t += (1.0 - cooling_capacity) * delta_t_cooling_c
        aid = topology.aisle_of_server(sid)
        t += recirculation_penalty_c(aisle_cfm[aid], eff_ahu_cfm[aid],
                                     RECIRCULATION_C_PER_10PCT)
        inlet[sid] = t

    temps = {}
    for sid in sids:
        gl = [min(max(float(x), 0.0), 1.0) for x in loads[sid]]
        temps[sid] = [profiles.predict_gpu_temp(sid, g, gl[g], inlet[sid])
                      for g in range(GPUS_PER_SERVER)]

    row_watts = {r.id: 0.0 for r in topology.rows}
    for sid in sids:
        row_watts[topology.row_of_server(sid)] += watts[sid]

    return {"mean_load": mean_load, "watts": watts, "cfm": cfm,
            "inlet_c": inlet, "temps_c": temps, "row_watts": row_watts,
            "aisle_cfm": aisle_cfm, "dc_load": dc_load}


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------

def feasible_servers(state, vm_load: float) -> set[str]:
    """Exhaustively enumerate the servers where the new VM keeps every
    predicted row power and aisle airflow total within its effective
    limit.

    All aggregates are rebuilt from the raw occupancy maps: each occupied
    server contributes its predicted-load draw, each free server its idle
    draw, and the candidate server is evaluated at ``vm_load``.
    """
    topo = state.topology
    out = set()
    for cand in topo.server_ids:
        if state.occupancy[cand] is not None:
            continue
        row_w = {r.id: 0.0 for r in topo.rows}
        ais_c = {a.id: 0.0 for a in topo.aisles}
        for sid in topo.server_ids:
            if sid == cand:
                load = vm_load
            elif state.occupancy[sid] is not None:
                load = state.predicted_load[sid]
            else:
                load = 0.0
            row_w[topo.row_of_server(sid)] += state._watts(sid, load)
            ais_c[topo.aisle_of_server(sid)] += state._cfm(sid, load)
        if (all(row_w[r] <= state.effective_row_w[r] + 1e-9 for r in row_w)
                and all(ais_c[a] <= state.effective_ahu_cfm[a] + 1e-9
                        for a in ais_c)):
            out.add(cand)
    return out


def enumerate_placements(topology: Topology,
                         power_curves: dict[str, PowerCurve],
                         fan_cfm: dict,
                         effective_row_w: dict[str, float],
                         effective_ahu_cfm: dict[str, float],
                         vm_loads: list[float]) -> set[frozenset]:
    """All complete assignments of the given VMs onto distinct servers
    that keep every row power and aisle airflow prediction within its
    effective limit.

    ``fan_cfm`` maps server id to a load -> CFM callable (missing servers
    contribute no airflow). Returns a set of frozensets of (vm index,
    server id) pairs. Instances are capped at 8 servers and 5 VMs so the
    exhaustive search stays trivial.
    """
    sids = list(topology.server_ids)
    if len(sids) > 8 or len(vm_loads) > 5:
        raise ValueError("instance too large for exhaustive enumeration")

    def ok(assign: dict[int, str]) -> bool:
        taken = {s: vm_loads[i] for i, s in assign.items()}
        row_w = {r.id: 0.0 for r in topology.rows}
        ais_c = {a.id: 0.0 for a in topology.aisles}
        for sid in sids:
            load = taken.get(sid, 0.0)
            row_w[topology.row_of_server(sid)] += power_curves[sid].watts(load)
            if sid in fan_cfm:
                ais_c[topology.aisle_of_server(sid)] += fan_cfm[sid](load)
        return (all(row_w[r] <= effective_row_w[r] + 1e-9 for r in row_w)
                and all(ais_c[a] <= effective_ahu_cfm[a] + 1e-9
                        for a in ais_c))

    out: set[frozenset] = set()

    def rec(i: int, assign: dict[int, str]):
        if i == len(vm_loads):
            out.add(frozenset((k, v) for k, v in assign.items()))
            return
        for sid in sids:
            if sid in assign.values():
                continue
            assign[i] = sid
            rec(i + 1, assign)
            del assign[i]

    rec(0, {})
    return {a for a in out if ok(dict(a))}


def row_mix_bruteforce(state, row_id: str, threshold: float) -> str:
    """Row mix label recomputed by scanning the occupancy map."""
    iaas = saas = 0
    for sid in state.topology.servers_in(row_id):
        vm = state.occupancy[sid]
        if vm is None:
            continue
        if state.vm_kind[vm] == "iaas":
            iaas += 1
        else:
            saas += 1
    total = iaas + saas
    if total == 0:
        return "balanced"
    if iaas / total > threshold:
        return "iaas-heavy"
    if saas / total > threshold:
        return "saas-heavy"
    return "balanced"


# ---------------------------------------------------------------------------
# Configuration selection
# ---------------------------------------------------------------------------

def select_config_bruteforce(table: list[ConfigProfile],
                             budget: InstanceBudget, evaluator,
                             current: ConfigProfile, min_quality: float,
                             demand_tps: float) -> ConfigProfile:
    """Reference profile selection by explicit pool construction.

    Builds every candidate pool as a full list and minimizes an explicit
    key, instead of walking a pre-sorted order and stopping at the first
    fit. Semantics: serve the demand (clamped at the best full-quality
    goodput) at the highest quality that can, preferring no reload, then
    the lowest power draw; fall back to best-effort goodput over all
    classes at or above the floor, quality breaking goodput ties.
    """
    best_full = max((p.goodput_tps for p in table if p.quality >= 1.0),
                    default=0.0)
    if best_full > 0.0:
        demand_tps = min(demand_tps, best_full)

    def u_of(p):
        return min(demand_tps / p.goodput_tps, 1.0) if p.goodput_tps > 0 else 0.0

    def fits(p):
        u = u_of(p)
        return (evaluator.watts(p, u) <= budget.max_power_w
                and evaluator.temp_c(p, u) <= budget.max_temp_c
                and evaluator.cfm(p, u) <= budget.max_airflow_cfm)

    def reload_cost(p):
        return p.reload_cost_ticks if p.needs_reload_from(current) else 0

    def cheapest(pool):
        return min(pool, key=lambda p: (
            reload_cost(p), evaluator.watts(p, u_of(p)),
            p.profile_id != current.profile_id, p.profile_id))

    fitting = [p for p in table if fits(p)]
    full_serving = [p for p in fitting
                    if p.quality >= 1.0 and p.goodput_tps >= demand_tps]
    if full_serving:
        return cheapest(full_serving)

    reduced_serving = [p for p in fitting
                       if min_quality <= p.quality < 1.0
                       and p.goodput_tps >= demand_tps]
    if reduced_serving:
        top = max(p.quality for p in reduced_serving)
        return cheapest([p for p in reduced_serving if p.quality == top])

    best_effort = [p for p in fitting if p.quality >= min_quality]
    if best_effort:
        top = max(p.goodput_tps for p in best_effort)
        pool = [p for p in best_effort if p.goodput_tps == top]
        topq = max(p.quality for p in pool)
        return cheapest([p for p in pool if p.quality == topq])

    raise ConfiguratorExhausted("no profile fits")


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def percentile_nearest_rank(values, pct: float) -> float:
    """Nearest-rank percentile: the smallest value with at least pct
    percent of the sample at or below it.
    """
    if not 0.0 < pct <= 100.0:
        raise ValueError("pct must be in (0, 100]")
    ordered = sorted(float(v) for v in values)
    if not ordered:
        raise ValueError("empty sample")
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[rank - 1]
