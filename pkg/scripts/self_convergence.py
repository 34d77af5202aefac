"""Self-convergence of the rough schemes on fBm with a bounded sine field.

Prints the seed-averaged sup-norm successive differences ||y_h - y_{h/2}||
per mesh and the fitted slope.

    python3 scripts/self_convergence.py --scheme rough2 --hurst 0.4 --seeds 8
"""

import argparse

import numpy as np

from rheat.algebra import TimeGrid
from rheat.convrp import ConvolutionalRoughPath
from rheat.dynamics import SolverConfig, sine_field, solve
from rheat.semigroup import GridFunction, SpectralGrid
from rheat.signal import lift, sample_fbm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scheme", default="rough2")
    ap.add_argument("--hurst", type=float, default=0.4)
    ap.add_argument("--seeds", type=int, default=8)
    ap.add_argument("--fine", type=int, default=12, help="log2 of fine cells")
    ap.add_argument("--min-mesh", type=int, default=6)
    ap.add_argument("-K", type=int, default=32)
    args = ap.parse_args()

    grid = SpectralGrid(1, args.K, 4 * args.K)
    psi = GridFunction.from_function(grid, np.cos)
    meshes = list(range(args.min_mesh, args.fine + 1))
    diffs = np.zeros(len(meshes) - 1)
    for seed in range(args.seeds):
        sig = lift(sample_fbm(args.hurst, 2, TimeGrid.uniform(1.0, 2**args.fine), seed))
        crp = ConvolutionalRoughPath(sig, grid)
        ys = [solve(SolverConfig(scheme=args.scheme, steps=2**L, audit=False), psi, crp, sine_field(2)).final
              for L in meshes]
        diffs += [(a - b).norm(np.inf) for a, b in zip(ys, ys[1:])]
    diffs /= args.seeds
    print("mesh_exponent,mean_successive_difference")
    for L, d in zip(meshes, diffs):
        print(f"{L},{d:.6e}")
    slope = -np.polyfit(meshes[:-1], np.log2(diffs), 1)[0]
    print(f"# slope={slope:.4f} target={0.8 * (3 * args.hurst - 1):.4f}")


if __name__ == "__main__":
    main()
