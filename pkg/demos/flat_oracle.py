"""Solve the flat two-regime chain and compare with the scalar root."""
import math

import numpy as np
from scipy.optimize import brentq

from fdbsde import builtin_scenario, solve_chain

spec = builtin_scenario("flat")
sol = solve_chain(spec)
y0 = brentq(lambda y: spec.rho * y + 0.02 - math.exp(-0.05 - y), -50, 50)
mask = sol.grid.interior_mask()
print(f"y^1 = {sol.y[1][mask].mean():+.6f}   (expected -0.05)")
print(f"y^0 = {sol.y[0][mask].mean():+.6f}   (root {y0:.6f})")
print(f"max error on the interior: {max(np.max(np.abs(sol.y[1][mask] + 0.05)), np.max(np.abs(sol.y[0][mask] - y0))):.2e}")
for b in sol.bounds:
    print(f"  {b.name:12s} n={b.n} observed={b.observed:.4g} bound={b.bound:.4g} pass={b.passed}")
