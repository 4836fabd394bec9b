"""Fit the thermal models from telemetry-style samples.

Generates ground-truth samples for the reference topology, fits the
per-server inlet and per-GPU temperature models, and reports mean
absolute error on fresh samples the fit never saw.
"""

import argparse
import time

import numpy as np

from tapas_sim.thermal import GroundTruth, fit_profile_set
from tapas_sim.topology import GPUS_PER_SERVER, grid_topology


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--samples", type=int, default=300)
    args = ap.parse_args()

    topo = grid_topology(n_aisles=4, racks_per_row=6, servers_per_rack=4)
    gt = GroundTruth(args.seed, topo)
    t0 = time.perf_counter()
    fitted = fit_profile_set(gt, n_samples=args.samples, seed=args.seed + 100)
    took = time.perf_counter() - t0

    abs_err = []
    for sid in topo.server_ids:
        t_out, load, y = gt.sample_inlet(sid, 50, seed=args.seed + 999)
        pred = [fitted.inlet_models[sid].evaluate(a, b)
                for a, b in zip(t_out, load)]
        abs_err.extend(np.abs(np.array(pred) - y))
        for g in range(GPUS_PER_SERVER):
            gl, t_in, yg = gt.sample_gpu(sid, g, 50, seed=args.seed + 999)
            pred = [fitted.gpu_models[(sid, g)].evaluate(a, b)
                    for a, b in zip(gl, t_in)]
            abs_err.extend(np.abs(np.array(pred) - yg))

    print(f"fit {len(topo.servers)} servers in {took:.2f} s")
    print(f"held-out MAE: {float(np.mean(abs_err)):.4f} C "
          f"over {len(abs_err)} samples")


if __name__ == "__main__":
    main()
