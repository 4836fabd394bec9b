"""Shared fixtures: small topologies and fitted models reused across files."""

import pytest

from tapas_sim.power import default_power_curve
from tapas_sim.thermal import GroundTruth, fit_profile_set
from tapas_sim.topology import grid_topology


@pytest.fixture(scope="session")
def small_topo():
    # 1 aisle pair, 2 racks per row, 4 servers per rack: 16 servers.
    return grid_topology(n_aisles=1, racks_per_row=2, servers_per_rack=4)


@pytest.fixture(scope="session")
def ground_truth(small_topo):
    return GroundTruth(7, small_topo)


@pytest.fixture(scope="session")
def fitted_profiles(ground_truth):
    return fit_profile_set(ground_truth, n_samples=150, seed=11)


@pytest.fixture(scope="session")
def power_curves(small_topo):
    return {s.id: default_power_curve(s.idle_power_w, s.tdp_w)
            for s in small_topo.servers}
