"""Workload generation: arrivals, traces, request batches, config profiles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tapas_sim.workload import (ArrivalParams, ConfigProfile, EndpointSpec,
                                WorkloadError, build_default_profiles,
                                diurnal_rate_series, generate_iaas_power_trace,
                                generate_outside_temp, generate_request_trace,
                                generate_vm_arrivals, load_profiles,
                                nominal_profile, pareto_frontier,
                                save_profiles)

PARAMS = ArrivalParams(n_vms=50, n_servers=64, iaas_fraction=0.4,
                       arrival_window_ticks=2000)


def test_arrivals_deterministic():
    a = generate_vm_arrivals(PARAMS, 7)
    b = generate_vm_arrivals(PARAMS, 7)
    assert [(v.vm_id, v.arrival_tick) for v in a] == \
        [(v.vm_id, v.arrival_tick) for v in b]
    c = generate_vm_arrivals(PARAMS, 8)
    assert [(v.vm_id, v.arrival_tick) for v in a] != \
        [(v.vm_id, v.arrival_tick) for v in c]


def test_arrival_mix_and_scopes():
    vms = generate_vm_arrivals(PARAMS, 7)
    assert len(vms) == PARAMS.n_vms
    iaas = [v for v in vms if v.kind == "iaas"]
    saas = [v for v in vms if v.kind == "saas"]
    assert len(iaas) == round(PARAMS.n_vms * PARAMS.iaas_fraction)
    for v in iaas:
        assert v.customer_id and not v.endpoint_id
    for v in saas:
        assert v.endpoint_id and not v.customer_id


def test_endpoints_striped_across_ids():
    # Consecutive SaaS VMs land on different endpoints, so every endpoint
    # spans the arrival (and therefore placement) order.
    vms = [v for v in generate_vm_arrivals(PARAMS, 7) if v.kind == "saas"]
    ordered = sorted(vms, key=lambda v: v.vm_id)
    eps = [v.endpoint_id for v in ordered]
    assert len(set(eps[:PARAMS.n_endpoints])) > 1


def test_vm_record_validation():
    from tapas_sim.workload import VmRecord
    with pytest.raises(WorkloadError):
        VmRecord(vm_id="x", kind="iaas", arrival_tick=0, lifetime_ticks=10)
    with pytest.raises(WorkloadError):
        VmRecord(vm_id="x", kind="saas", arrival_tick=0, lifetime_ticks=10,
                 customer_id="c")
    with pytest.raises(WorkloadError):
        VmRecord(vm_id="x", kind="iaas", arrival_tick=0, lifetime_ticks=0,
                 customer_id="c")


def test_iaas_trace_shape_and_bounds():
    vms = [v for v in generate_vm_arrivals(PARAMS, 7) if v.kind == "iaas"]
    vm = vms[0]
    trace = generate_iaas_power_trace(vm, 7)
    assert len(trace) >= vm.lifetime_ticks
    arr = np.asarray(trace)
    assert arr.min() >= 0.0 and arr.max() <= 1.0


def test_iaas_trace_diurnal_structure():
    from tapas_sim.workload import VmRecord
    vm = VmRecord(vm_id="vm-test", kind="iaas", arrival_tick=0,
                  lifetime_ticks=2880, customer_id="cust0")
    trace = np.asarray(generate_iaas_power_trace(vm, 7))[:2880]
    by_hour = trace.reshape(48, 60).mean(axis=1)
    assert by_hour.max() - by_hour.min() > 0.1


def test_diurnal_rate_series_bounds():
    rates = diurnal_rate_series(1440, 100.0, 7, "ep0")
    arr = np.asarray(rates)
    assert len(arr) == 1440
    assert arr.min() >= 0.0
    assert arr.max() <= 100.0 * 1.3
    assert arr.max() > arr.min()


def test_request_trace_tokens_match_rates():
    spec = EndpointSpec(endpoint_id="ep0", vm_count=3,
                        rate_tps=tuple(diurnal_rate_series(720, 500.0, 7, "ep0")))
    batches = generate_request_trace(spec, 7, batches_per_tick=8)
    per_tick = {}
    for b in batches:
        assert b.tokens >= 0.0
        per_tick[b.tick] = per_tick.get(b.tick, 0.0) + b.tokens
    # Tokens per tick track the rate series (tokens/s times 60 s).
    mid = len(spec.rate_tps) // 2
    assert per_tick[mid] == pytest.approx(spec.rate_tps[mid] * 60.0, rel=0.35)


def test_request_trace_deterministic():
    spec = EndpointSpec(endpoint_id="ep0", vm_count=2,
                        rate_tps=tuple(diurnal_rate_series(100, 50.0, 7, "ep0")))
    a = generate_request_trace(spec, 7)
    b = generate_request_trace(spec, 7)
    assert [(x.tick, x.tokens, x.affinity_key) for x in a] == \
        [(x.tick, x.tokens, x.affinity_key) for x in b]


def test_outside_temp_daily_cycle():
    temps = np.asarray(generate_outside_temp(2880, 7, mean_c=20.0,
                                             daily_amplitude_c=5.0))
    assert len(temps) == 2880
    assert 5.0 < temps.mean() < 35.0
    day1, day2 = temps[:1440], temps[1440:]
    # Same phase on consecutive days: peak hours roughly align.
    assert abs(int(day1.argmax()) - int(day2.argmax())) < 240


def test_default_profiles_table():
    table = build_default_profiles()
    ids = [p.profile_id for p in table]
    assert len(ids) == len(set(ids))
    nom = nominal_profile(table)
    assert nom.quality == 1.0
    assert nom.goodput_tps == max(p.goodput_tps for p in table
                                  if p.quality >= 1.0)
    for p in table:
        assert 0.0 < p.quality <= 1.0
        assert p.goodput_tps > 0
        assert 0.0 < p.mean_load <= 1.0
        assert p.tp in (2, 4, 8)


def test_profile_reload_rules():
    table = build_default_profiles()
    by_id = {p.profile_id: p for p in table}
    nom = nominal_profile(table)
    for p in table:
        same_shape = (p.model == nom.model and p.tp == nom.tp
                      and p.quant == nom.quant)
        assert p.needs_reload_from(nom) == (not same_shape)
    assert not nom.needs_reload_from(by_id[nom.profile_id])


def test_profiles_roundtrip(tmp_path):
    table = build_default_profiles()
    path = tmp_path / "profiles.json"
    save_profiles(table, path)
    loaded = load_profiles(path)
    assert loaded == table


def test_pareto_frontier_dominance():
    table = build_default_profiles()
    front = pareto_frontier(table)
    assert front
    ids = {p.profile_id for p in front}
    for p in table:
        dominated = any(
            q.max_gpu_temp_c <= p.max_gpu_temp_c
            and q.server_watts <= p.server_watts
            and q.goodput_tps >= p.goodput_tps
            and (q.max_gpu_temp_c < p.max_gpu_temp_c
                 or q.server_watts < p.server_watts
                 or q.goodput_tps > p.goodput_tps)
            for q in table if q is not p)
        assert (p.profile_id in ids) == (not dominated)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_arrivals_within_window(seed):
    vms = generate_vm_arrivals(ArrivalParams(n_vms=20, n_servers=32,
                                             arrival_window_ticks=500), seed)
    for v in vms:
        assert 0 <= v.arrival_tick <= 500
        assert v.lifetime_ticks > 0
