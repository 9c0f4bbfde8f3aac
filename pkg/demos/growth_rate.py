"""Vanishing-discount limit and the long-run risk-sensitive growth rate on the flat scenario."""
from fdbsde import builtin_scenario, ergodic_continuation, ergodic_residual
from fdbsde.harness import growth_rate_estimate

spec = builtin_scenario("flat")
erg = ergodic_continuation(spec)
print("rho ladder:")
for rho, v in zip(erg.ladder, erg.varrho_trace):
    print(f"  rho={rho:.3e}  rho*y^1 = {v:+.8f}")
print(f"varrho = {erg.varrho:+.8f}, residual sup = {ergodic_residual(spec, erg).sup_all:.1e}")

rep = growth_rate_estimate(spec, erg, horizons=(10.0, 25.0, 50.0), paths=10_000, seed=0, dt=1e-2)
for T, est, se in zip(rep.horizons, rep.estimates, rep.ses):
    print(f"T={T:<4g} growth rate {est:+.5f} +- {se:.1e}")
