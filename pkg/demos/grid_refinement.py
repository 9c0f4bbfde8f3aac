"""Successive-difference study of the curved chain on 512/1024/2048 cells."""
from fdbsde import builtin_scenario
from fdbsde.solver import refinement_study

r = refinement_study(builtin_scenario("curved"), sizes=(256, 512, 1024, 2048))
for k, N in enumerate(r.sizes[:-1]):
    print(f"||y_{N} - y_{r.sizes[k + 1]}|| = " + "  ".join(f"y{n}: {d:.3e}" for n, d in enumerate(r.diffs[k])))
for k, N in enumerate(r.sizes[:-2]):
    print(f"ratio at N={N}: " + "  ".join(f"y{n}: {q:.4f} (order {p:.3f})"
                                          for n, (q, p) in enumerate(zip(r.ratios[k], r.orders[k]))))
