"""Thermal models: fitting accuracy, monotonicity, fan anchors, ground truth."""

import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tapas_sim.thermal import (FanCurve, FittingError, GroundTruth,
                               PiecewiseModel, default_fan_curve,
                               fit_piecewise, fit_profile_set,
                               recirculation_penalty_c)
from tapas_sim.topology import GPUS_PER_SERVER, grid_topology


def test_fit_mae_and_runtime(small_topo):
    gt = GroundTruth(7, small_topo)
    t0 = time.time()
    fitted = fit_profile_set(gt, n_samples=300, noise_c=0.3, seed=5)
    elapsed = time.time() - t0
    errs = []
    for sid in small_topo.server_ids:
        t_out, load, y = gt.sample_inlet(sid, 80, seed=999)
        errs.extend(abs(fitted.inlet_models[sid].evaluate(a, b) - c)
                    for a, b, c in zip(t_out, load, y))
        for g in range(GPUS_PER_SERVER):
            gl, t_in, yg = gt.sample_gpu(sid, g, 80, seed=999)
            errs.extend(abs(fitted.gpu_models[(sid, g)].evaluate(a, b) - c)
                        for a, b, c in zip(gl, t_in, yg))
    assert float(np.mean(errs)) < 1.0
    assert elapsed < 30.0


def test_fitted_monotone_in_both_inputs(fitted_profiles, small_topo):
    sid = small_topo.server_ids[0]
    m = fitted_profiles.inlet_models[sid]
    xs = np.linspace(0, 40, 30)
    for dc in (0.0, 0.5, 1.0):
        vals = [m.evaluate(x, dc) for x in xs]
        assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
    for t in (0.0, 20.0, 40.0):
        assert m.evaluate(t, 1.0) >= m.evaluate(t, 0.0) - 1e-9


def test_gpu_model_monotone_in_load(fitted_profiles, small_topo):
    sid = small_topo.server_ids[0]
    m = fitted_profiles.gpu_models[(sid, 0)]
    loads = np.linspace(0, 1, 20)
    vals = [m.evaluate(x, 25.0) for x in loads]
    assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))


def test_piecewise_clamps_outside_domain():
    m = PiecewiseModel(knots=(0.0, 1.0), seg_coeffs=((2.0, 3.0),),
                       x2_coeffs=(0.5,), x2_bounds=(0.0, 1.0))
    assert m.evaluate(-5.0, 0.0) == m.evaluate(0.0, 0.0)
    assert m.evaluate(9.0, 2.0) == m.evaluate(1.0, 1.0)


def test_fit_requires_enough_samples():
    rng = np.random.default_rng(0)
    x1, x2 = rng.uniform(0, 1, 10), rng.uniform(0, 1, 10)
    with pytest.raises(FittingError):
        fit_piecewise(x1, x2, x1 + x2, (0.0, 1.0))


def test_fan_anchor_values():
    # Airflow anchors at 80% PWM: 840 CFM (A100) and 1105 CFM (H100).
    a100 = default_fan_curve("A100")
    h100 = default_fan_curve("H100")
    assert a100.cfm_per_pwm * 80.0 == pytest.approx(840.0)
    assert h100.cfm_per_pwm * 80.0 == pytest.approx(1105.0)
    # Idle fans sit at 30% PWM: 315 CFM for the A100 class.
    assert a100.airflow_cfm(0.0) == pytest.approx(315.0)
    # The load that maps to 80% PWM reproduces the anchor exactly.
    load_80 = (80.0 - a100.idle_pwm) / (a100.full_pwm - a100.idle_pwm)
    assert a100.airflow_cfm(load_80) == pytest.approx(840.0)


def test_fan_monotone_and_clamped():
    fan = FanCurve(gpu_type="X", cfm_per_pwm=10.0)
    flows = [fan.airflow_cfm(x) for x in np.linspace(-0.5, 1.5, 21)]
    assert all(b >= a for a, b in zip(flows, flows[1:]))
    assert fan.airflow_cfm(2.0) == fan.airflow_cfm(1.0)


def test_recirculation_penalty():
    assert recirculation_penalty_c(90.0, 100.0) == 0.0
    assert recirculation_penalty_c(110.0, 100.0) == pytest.approx(3.0)
    assert recirculation_penalty_c(120.0, 100.0) == pytest.approx(6.0)


def test_ground_truth_deterministic(small_topo):
    a = GroundTruth(13, small_topo).profiles
    b = GroundTruth(13, small_topo).profiles
    sid = small_topo.server_ids[3]
    assert a.inlet_models[sid].evaluate(25.0, 0.5) == \
        b.inlet_models[sid].evaluate(25.0, 0.5)
    assert a.gpu_models[(sid, 5)].evaluate(0.7, 27.0) == \
        b.gpu_models[(sid, 5)].evaluate(0.7, 27.0)


def test_profile_set_roundtrip(fitted_profiles, tmp_path):
    path = tmp_path / "profiles.json"
    fitted_profiles.save(path)
    loaded = type(fitted_profiles).load(path)
    sid = fitted_profiles.server_ids[0]
    assert loaded.inlet_models[sid].evaluate(20.0, 0.4) == pytest.approx(
        fitted_profiles.inlet_models[sid].evaluate(20.0, 0.4))


@settings(max_examples=30, deadline=None)
@given(t_out=st.floats(0.0, 40.0), dc=st.floats(0.0, 1.0),
       load=st.floats(0.0, 1.0))
def test_prediction_bounds_property(t_out, dc, load):
    topo = grid_topology(n_aisles=1, racks_per_row=1, servers_per_rack=2)
    gt = GroundTruth(3, topo)
    sid = topo.server_ids[0]
    inlet = gt.profiles.predict_inlet(sid, t_out, dc)
    temp = gt.profiles.predict_gpu_temp(sid, 0, load, inlet)
    assert 10.0 < inlet < 60.0
    assert temp >= inlet
