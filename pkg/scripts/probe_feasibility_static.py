"""Development probe: max per-rotor reference thrust from the flatness
expansion across the trajectory grid, printed as feasibility tables."""

import numpy as np

from quadtrack.trajectories import flat_to_full, sample_ellipse, trajectory_grid
from quadtrack.vehicle import QuadParams


def max_ref_thrust(spec, params, n=400, drag=True):
    worst = 0.0
    worst_rate = 0.0
    for t in np.linspace(0.0, spec.period, n, endpoint=False):
        full = flat_to_full(sample_ellipse(spec, t), params, drag=drag)
        worst = max(worst, float(np.max(full.rotor_thrusts)))
        worst_rate = max(worst_rate, float(np.max(np.abs(full.rates))))
    return worst, worst_rate


def main():
    params = QuadParams()
    grid = trajectory_grid()
    by_cell = {}
    for spec in grid:
        u, w = max_ref_thrust(spec, params)
        by_cell[(spec.plane, spec.a_max, spec.ellipticity, spec.v_max)] = (u, w)

    for plane in ("horizontal", "vertical"):
        print(f"\n== {plane}: max rotor thrust (N)  [u_max = {params.u_max}]")
        header = "a\\ " + "".join(f"n={n:<3g}V={v:<8g}" for n in (1, 2, 5)
                                  for v in (5, 10, 15, 20))
        print(header)
        for a in (10, 20, 30, 40, 50, 60):
            row = [f"a={a:<3}"]
            for n in (1, 2, 5):
                for v in (5, 10, 15, 20):
                    u, _ = by_cell[(plane, a, n, v)]
                    mark = " " if u <= params.u_max else "*"
                    row.append(f"{u:7.2f}{mark}    ")
            print("".join(row))
        print(f"\n== {plane}: max |body rate| (rad/s)")
        for a in (10, 20, 30, 40, 50, 60):
            row = [f"a={a:<3}"]
            for n in (1, 2, 5):
                for v in (5, 10, 15, 20):
                    _, w = by_cell[(plane, a, n, v)]
                    row.append(f"{w:7.2f}     ")
            print("".join(row))

    feas = sum(1 for u, _ in by_cell.values() if u <= params.u_max)
    print(f"\nstatic classification: {feas} feasible / {144 - feas} infeasible")


if __name__ == "__main__":
    main()
