"""Sensitivity of the rough2 solution to an antisymmetric perturbation of the area.

    python3 scripts/ito_probe.py
"""

import numpy as np

from rheat.algebra import TimeGrid
from rheat.convrp import ConvolutionalRoughPath
from rheat.dynamics import SolverConfig, sine_field, solve
from rheat.semigroup import GridFunction, SpectralGrid
from rheat.signal import builtin_path, lift


def main():
    grid = SpectralGrid(1, 32, 128)
    psi = GridFunction.from_function(grid, np.cos)
    E = np.array([[0.0, 1.0], [-1.0, 0.0]])
    sig = lift(builtin_path("smooth", TimeGrid.uniform(1.0, 2**10), 2), level=2)
    cfg = SolverConfig(scheme="rough2", steps=256, audit=False)
    base = solve(cfg, psi, ConvolutionalRoughPath(sig, grid), sine_field(2)).final
    scale = np.abs(sig.area(0.0, 1.0)).max()
    print("delta,relative_change,ratio")
    for delta in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5):
        y = solve(cfg, psi, ConvolutionalRoughPath(sig.with_area_perturbation(delta, E), grid), sine_field(2)).final
        rel = (y - base).norm(np.inf) / base.norm(np.inf)
        print(f"{delta:.0e},{rel:.4e},{rel / (delta / scale):.4f}")


if __name__ == "__main__":
    main()
