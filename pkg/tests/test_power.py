"""Power curves, row sums, and hour-of-week power templates."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tapas_sim.oracles import percentile_nearest_rank
from tapas_sim.power import (PowerCurve, TemplateError, build_template,
                             default_power_curve, nearest_rank_percentile,
                             predict_power, row_power, row_power_ok,
                             server_power)


def test_curve_endpoints():
    c = default_power_curve(1500.0, 6500.0)
    assert c.watts(0.0) == pytest.approx(1500.0)
    assert c.watts(1.0) == pytest.approx(6500.0)
    assert c.idle_w == pytest.approx(1500.0)
    assert c.full_w == pytest.approx(6500.0)


def test_curve_monotone_and_concave():
    c = default_power_curve(1500.0, 6500.0)
    xs = np.linspace(0, 1, 50)
    ys = [c.watts(x) for x in xs]
    assert all(b >= a for a, b in zip(ys, ys[1:]))
    # Concavity: marginal watts per unit load shrink with load.
    d = np.diff(ys)
    assert all(b <= a + 1e-9 for a, b in zip(d, d[1:]))


def test_curve_clamps_input():
    c = default_power_curve(100.0, 200.0)
    assert c.watts(-1.0) == c.watts(0.0)
    assert c.watts(5.0) == c.watts(1.0)


def test_server_power_validates():
    c = default_power_curve(100.0, 200.0)
    with pytest.raises(ValueError):
        server_power(c, 1.5)


def test_row_power_sum(small_topo, power_curves):
    loads = {sid: 0.5 for sid in small_topo.server_ids}
    row = small_topo.rows[0].id
    total = row_power(small_topo, power_curves, loads, row)
    expected = sum(power_curves[s].watts(0.5)
                   for s in small_topo.servers_in(row))
    assert total == pytest.approx(expected)
    ok, slack = row_power_ok(small_topo, power_curves, loads, row)
    assert ok and slack == pytest.approx(small_topo.rows[0].prov_power_w - total)


def test_row_power_over_limit(small_topo, power_curves):
    loads = {sid: 1.0 for sid in small_topo.server_ids}
    row = small_topo.rows[0].id
    ok, slack = row_power_ok(small_topo, power_curves, loads, row,
                             effective_prov_w=1000.0)
    assert not ok and slack < 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1000.0), min_size=1, max_size=60),
       st.floats(1.0, 100.0))
def test_percentile_matches_oracle(values, pct):
    assert nearest_rank_percentile(np.array(values), pct) == \
        pytest.approx(percentile_nearest_rank(values, pct))


def test_template_build_and_predict():
    ticks = 168 * 60
    rng = np.random.default_rng(4)
    hours = (np.arange(ticks) // 60) % 168
    watts = 100.0 + 50.0 * np.sin(2 * np.pi * hours / 24) + rng.normal(0, 2, ticks)
    tpl = build_template("cust0", hours, watts, percentile=99.0)
    assert tpl.training_weeks == 1
    assert len(tpl.slots_w) == 168
    # P99 sits at or above almost every sample in its own slot.
    for h in (0, 50, 167):
        sample = watts[hours == h]
        assert predict_power(tpl, h) >= np.quantile(sample, 0.95)
    assert tpl.peak_w == max(tpl.slots_w)


def test_template_too_short():
    hours = np.zeros(100, dtype=int)
    with pytest.raises(TemplateError):
        build_template("c", hours, np.ones(100), 99.0)


def test_template_roundtrip(tmp_path):
    ticks = 168 * 60
    hours = (np.arange(ticks) // 60) % 168
    tpl = build_template("c", hours, np.ones(ticks) * 7.0, 90.0)
    path = tmp_path / "tpl.json"
    tpl.save(path)
    import json
    loaded = type(tpl).from_dict(json.loads(path.read_text()))
    assert loaded == tpl


def test_predict_power_validates_slot():
    ticks = 168 * 60
    hours = (np.arange(ticks) // 60) % 168
    tpl = build_template("c", hours, np.ones(ticks), 50.0)
    with pytest.raises(ValueError):
        predict_power(tpl, 168)
