"""V-process checks on the curved scenario: optimal vs. suboptimal strategies."""
import sys

from fdbsde import builtin_scenario, solve_chain
from fdbsde.harness import decomposition_identity_test, martingale_test

paths = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
spec = builtin_scenario("curved")
sol = solve_chain(spec, newton=True)

for strategy in ("optimal", "zero", "scaled:1.5"):
    rep = martingale_test(spec, sol, strategy, n=0, paths=paths, seed=1, dt=1e-2)
    print(f"{strategy:11s} {rep.kind}")
    for r in rep.rows():
        print(f"   t={r['checkpoint']:<4g} E[V]={r['mean']:+.5f}  V0={r['reference']:+.5f}  "
              f"gap={r['gap']:+.2e}  se={r['se']:.1e}  {'PASS' if r['pass'] else 'FAIL'}")

rep = decomposition_identity_test(spec, sol, 0, paths=paths, seed=2, dt=1e-2)
print(f"decomposition n=0: relative gap {rep.rel_gap:+.2e} (se {rep.rel_se:.1e}) {'PASS' if rep.passed else 'FAIL'}")
