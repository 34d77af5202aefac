"""Error table for the commuting linear flow f_i = c_i phi on a smooth signal.

    python3 scripts/commuting_oracle.py --c 6 3
"""

import argparse

import numpy as np

from rheat.algebra import TimeGrid
from rheat.convrp import ConvolutionalRoughPath
from rheat.dynamics import SolverConfig, commuting_flow_solution, linear_field, solve
from rheat.semigroup import GridFunction, SpectralGrid
from rheat.signal import builtin_path, lift

SCHEMES = ("young_euler", "rough2", "rough3")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--c", type=float, nargs=2, default=[6.0, 3.0])
    ap.add_argument("--fine", type=int, default=10)
    ap.add_argument("--min-mesh", type=int, default=4)
    ap.add_argument("-K", type=int, default=32)
    args = ap.parse_args()

    grid = SpectralGrid(1, args.K, 4 * args.K)
    psi = GridFunction.from_function(grid, lambda x: 2 * np.cos(x))
    crp = ConvolutionalRoughPath(lift(builtin_path("smooth", TimeGrid.uniform(1.0, 2**args.fine), 2)), grid)
    ref = commuting_flow_solution(psi, crp, args.c, 1.0)
    meshes = np.arange(args.min_mesh, args.fine + 1)
    errs = {s: [] for s in SCHEMES}
    for L in meshes:
        for s in SCHEMES:
            y = solve(SolverConfig(scheme=s, steps=2**L, audit=False), psi, crp, linear_field(args.c)).final
            errs[s].append((y - ref).norm(np.inf) / ref.norm(np.inf))
    print("mesh_exponent," + ",".join(SCHEMES) + ",rough3_over_rough2")
    for k, L in enumerate(meshes):
        row = [errs[s][k] for s in SCHEMES]
        print(f"{L}," + ",".join(f"{e:.4e}" for e in row) + f",{row[2] / row[1]:.3f}")
    for s in SCHEMES:
        print(f"# order[{s}]={-np.polyfit(meshes, np.log2(errs[s]), 1)[0]:.3f}")


if __name__ == "__main__":
    main()
