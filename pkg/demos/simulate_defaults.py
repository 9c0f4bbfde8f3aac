"""Simulate the default-driven market and print terminal wealth by regime."""
import numpy as np

from fdbsde import builtin_scenario, solve_chain
from fdbsde.harness import simulate_bundle

spec = builtin_scenario("curved")
sol = solve_chain(spec, newton=True)
b = simulate_bundle(spec, sol, "optimal", horizon=2.0, dt=1e-2, paths=5000, seed=3, record_times=[2.0])
regime = b.regime[:, -1]
for n in range(spec.m + 1):
    x = b.X[regime == n, -1]
    print(f"regime {n} at T=2: {x.size:5d} paths, mean wealth {x.mean():+.4f}")
print(f"jump bookkeeping errors: wealth {b.wealth_jump_error():.1e}, price {b.price_jump_error():.1e}")
print(f"fraction defaulted by T=2: {np.mean(b.default_times[:, 0] <= 2.0):.3f}")
