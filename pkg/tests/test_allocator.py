"""Placement: validator soundness against the oracle, tiers, ranking."""

import numpy as np
import pytest

from tapas_sim.allocator import (Allocator, AllocatorConfig, LoadHistory,
                                 PlacementError, PlacementState, compute_tiers,
                                 estimate_vm_load)
from tapas_sim.oracles import (enumerate_placements, feasible_servers,
                               percentile_nearest_rank, row_mix_bruteforce)
from tapas_sim.power import default_power_curve
from tapas_sim.thermal import GroundTruth
from tapas_sim.topology import grid_topology
from tapas_sim.workload import VmRecord

TICKS_PER_WEEK = 10080


def _toy(seed, n_racks=1):
    """A 1-aisle toy instance with randomized limits and occupancy."""
    rng = np.random.default_rng(seed)
    topo = grid_topology(n_aisles=1, racks_per_row=n_racks,
                         servers_per_rack=4)
    gt = GroundTruth(seed, topo)
    curves = {s.id: default_power_curve(s.idle_power_w, s.tdp_w)
              for s in topo.servers}
    alloc = Allocator(topo, gt.profiles, curves, AllocatorConfig())
    st = alloc.state
    # Random pre-existing occupancy.
    for i, sid in enumerate(topo.server_ids):
        if rng.random() < 0.4:
            kind = "iaas" if rng.random() < 0.5 else "saas"
            vm = VmRecord(vm_id=f"pre{i}", kind=kind, arrival_tick=0,
                          lifetime_ticks=100,
                          customer_id="c0" if kind == "iaas" else None,
                          endpoint_id="e0" if kind == "saas" else None)
            st.admit(vm, sid, rng.uniform(0.2, 1.0))
    # Tighten limits randomly, never below the current aggregates so the
    # starting state stays feasible (both checkers assume that).
    for r in topo.rows:
        lim = st.effective_row_w[r.id] * rng.uniform(0.55, 1.0)
        st.effective_row_w[r.id] = max(lim, st.predicted_row_w[r.id] + 1e-3)
    for a in topo.aisles:
        lim = st.effective_ahu_cfm[a.id] * rng.uniform(0.55, 1.0)
        st.effective_ahu_cfm[a.id] = max(lim, st.predicted_aisle_cfm[a.id] + 1e-3)
    return topo, alloc, rng


def test_filter_feasible_matches_oracle_200_instances():
    for seed in range(200):
        topo, alloc, rng = _toy(seed)
        load = rng.uniform(0.1, 1.0)
        got = set(alloc.filter_feasible(load))
        want = feasible_servers(alloc.state, load)
        assert got == want, f"seed {seed}: {got} != {want}"


def test_enumeration_matches_filter_driven_search():
    # The validator applied VM by VM reaches exactly the assignments the
    # exhaustive oracle accepts, for all visit orders on small instances.
    for seed in range(30):
        topo, alloc, rng = _toy(seed, n_racks=1)
        st = alloc.state
        for vid in list(st.vm_server):
            st.release(vid)
        loads = [rng.uniform(0.2, 1.0) for _ in range(3)]
        fan_cfm = dict(st.fan_cfm)
        want = enumerate_placements(topo, st.power_curves,
                                    fan_cfm, st.effective_row_w,
                                    st.effective_ahu_cfm, loads)

        got = set()

        def search(i, placed):
            if i == len(loads):
                got.add(frozenset(placed))
                return
            for sid in alloc.filter_feasible(loads[i]):
                vm = VmRecord(vm_id=f"t{i}", kind="iaas", arrival_tick=0,
                              lifetime_ticks=10, customer_id="c")
                st.admit(vm, sid, loads[i])
                search(i + 1, placed + [(i, sid)])
                st.release(vm.vm_id)

        search(0, [])
        assert got == want, f"seed {seed}"


def test_oracle_hand_checked_instance():
    # 2 servers, 1 VM: with generous limits both placements are feasible;
    # with a row limit below any loaded server the set is empty.
    topo = grid_topology(n_aisles=1, racks_per_row=1, servers_per_rack=1)
    curves = {s.id: default_power_curve(100.0, 200.0) for s in topo.servers}
    wide = {r.id: 1e9 for r in topo.rows}
    cfm = {a.id: 1e9 for a in topo.aisles}
    out = enumerate_placements(topo, curves, {}, wide, cfm, [1.0])
    assert len(out) == 2
    tight = {r.id: 150.0 for r in topo.rows}
    out = enumerate_placements(topo, curves, {}, tight, cfm, [1.0])
    assert out == set()


def test_enumeration_size_bounds():
    topo = grid_topology(n_aisles=2, racks_per_row=2, servers_per_rack=4)
    with pytest.raises(ValueError):
        enumerate_placements(topo, {}, {}, {}, {}, [0.5])


def test_tier_sizes_balanced(small_topo):
    gt = GroundTruth(7, small_topo)
    tiers = compute_tiers(small_topo, gt.profiles)
    counts = [list(tiers.values()).count(t) for t in (0, 1, 2)]
    assert max(counts) - min(counts) <= 1
    assert sum(counts) == small_topo.server_count


def test_tiers_order_by_idle_temp(small_topo):
    gt = GroundTruth(7, small_topo)
    tiers = compute_tiers(small_topo, gt.profiles)

    def idle_temp(sid):
        inlet = gt.profiles.predict_inlet(sid, 25.0, 0.5)
        return max(gt.profiles.predict_gpu_temp(sid, g, 0.0, inlet)
                   for g in range(8))

    cold = [idle_temp(s) for s, t in tiers.items() if t == 0]
    warm = [idle_temp(s) for s, t in tiers.items() if t == 2]
    assert max(cold) <= min(warm)


def test_row_mix_matches_oracle():
    for seed in range(20):
        topo, alloc, _ = _toy(seed, n_racks=2)
        st = alloc.state
        for r in topo.rows:
            for th in (0.4, 0.6):
                assert st.row_mix(r.id, th) == row_mix_bruteforce(st, r.id, th)


def test_place_respects_validator():
    topo, alloc, rng = _toy(3)
    vm = VmRecord(vm_id="new", kind="iaas", arrival_tick=0,
                  lifetime_ticks=100, customer_id="c9")
    load = 0.9
    feasible = set(alloc.filter_feasible(load))
    sid = alloc.place_vm(vm, load, tick=0)
    if feasible:
        assert sid in feasible
    else:
        assert sid is None
        assert alloc.pending


def test_double_admit_rejected(small_topo, power_curves):
    gt = GroundTruth(7, small_topo)
    alloc = Allocator(small_topo, gt.profiles, power_curves, AllocatorConfig())
    vm1 = VmRecord(vm_id="a", kind="iaas", arrival_tick=0, lifetime_ticks=5,
                   customer_id="c")
    vm2 = VmRecord(vm_id="b", kind="iaas", arrival_tick=0, lifetime_ticks=5,
                   customer_id="c")
    sid = small_topo.server_ids[0]
    alloc.state.admit(vm1, sid, 0.5)
    with pytest.raises(PlacementError):
        alloc.state.admit(vm2, sid, 0.5)


def test_release_restores_aggregates(small_topo, power_curves):
    gt = GroundTruth(7, small_topo)
    alloc = Allocator(small_topo, gt.profiles, power_curves, AllocatorConfig())
    st = alloc.state
    before_w = dict(st.predicted_row_w)
    before_c = dict(st.predicted_aisle_cfm)
    vm = VmRecord(vm_id="x", kind="saas", arrival_tick=0, lifetime_ticks=5,
                  endpoint_id="e")
    st.admit(vm, small_topo.server_ids[2], 0.8)
    st.release("x")
    for k in before_w:
        assert st.predicted_row_w[k] == pytest.approx(before_w[k])
    for k in before_c:
        assert st.predicted_aisle_cfm[k] == pytest.approx(before_c[k])


def test_load_history_peak_matches_oracle():
    hist = LoadHistory()
    rng = np.random.default_rng(2)
    series = rng.uniform(0.0, 1.0, TICKS_PER_WEEK)
    for t, x in enumerate(series):
        hist.record("cust", t, x)
    peak = hist.peak("cust")
    hours = (np.arange(TICKS_PER_WEEK) // 60) % 168
    want = max(percentile_nearest_rank(series[hours == h], 99.0)
               for h in range(168))
    assert peak == pytest.approx(want)


def test_estimate_defaults_to_peak_without_history():
    hist = LoadHistory()
    vm = VmRecord(vm_id="v", kind="iaas", arrival_tick=0, lifetime_ticks=10,
                  customer_id="c")
    assert estimate_vm_load(hist, vm) == 1.0


def test_baseline_ignores_validator(small_topo, power_curves):
    gt = GroundTruth(7, small_topo)
    alloc = Allocator(small_topo, gt.profiles, power_curves,
                      AllocatorConfig(aware=False))
    # Shrink limits so nothing would be feasible for the aware policy.
    for r in small_topo.rows:
        alloc.state.effective_row_w[r.id] = 1.0
    vm = VmRecord(vm_id="v", kind="iaas", arrival_tick=0, lifetime_ticks=10,
                  customer_id="c")
    sid = alloc.place_vm(vm, 1.0, 0)
    assert sid == alloc.state.vm_server["v"]
