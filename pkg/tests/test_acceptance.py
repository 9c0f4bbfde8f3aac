"""Acceptance criteria at desk scale.

Each test prints (and records for the terminal summary) one PASS/FAIL line.
Reference grid: N = 512 on [-6, 6]; reference Monte Carlo: 1e5 paths, dt = 1e-3.
Run alone with `pytest tests/test_acceptance.py -v -s`.
"""
import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from fdbsde import harness as H
from fdbsde.defaults import DefaultDensity, survival_density
from fdbsde.scenario import builtin_scenario
from fdbsde.solver import ergodic_continuation, ergodic_residual, jump_gap, refinement_study, solve_chain

from conftest import ACCEPTANCE

PATHS = 100_000
DT = 1e-3
CHECKPOINTS = (0.5, 1.0, 2.0)


def record(tag, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    return ok


def test_c1_flat_oracle():
    spec = builtin_scenario("flat")
    t0 = time.perf_counter()
    sol = solve_chain(spec, spec.rho)
    wall = time.perf_counter() - t0
    y0 = brentq(lambda y: 0.1 * y + 0.02 - math.exp(-0.05 - y), -50, 50, xtol=1e-15)
    mask = sol.grid.interior_mask()
    e1 = float(np.max(np.abs(sol.y[1][mask] + 0.05)))
    e0 = float(np.max(np.abs(sol.y[0][mask] - y0)))
    ok = e1 <= 1e-4 and e0 <= 1e-4 and wall < 10
    assert record("C1 flat oracle", ok, f"|y1+0.05|={e1:.2e} |y0-{y0:.4f}|={e0:.2e} (tol 1e-4), {wall:.2f}s < 10s")


@pytest.fixture(scope="module")
def curved_ladder():
    spec = builtin_scenario("curved")
    t0 = time.perf_counter()
    sols = {rho: solve_chain(spec, rho, newton=True) for rho in (0.5, 0.1, 0.02)}
    return spec, sols, time.perf_counter() - t0


def test_c2_bound_certification(curved_ladder):
    spec, sols, wall = curved_ladder
    parts, ok = [], wall < 300
    for rho, sol in sols.items():
        L, grid = sol.ledger, sol.grid
        eps = 10 * float(grid.h[0])
        mask = grid.interior_mask()
        worst = 0.0  # largest observed / (bound + eps)
        for n in range(spec.m + 1):
            ysup = np.max(np.abs(sol.y[n][mask]))
            zsup = np.max(np.abs(sol.z[n][mask]))
            ok &= ysup <= L.K_Y / rho + eps and zsup <= L.K_Z[n] + eps
            worst = max(worst, ysup / (L.K_Y / rho + eps), zsup / (L.K_Z[n] + eps))
            if n >= 1:
                ok &= np.max(jump_gap(sol, n)[mask]) <= L.K_DeltaY(n) + eps
        parts.append(f"rho={rho}: max ratio {worst:.3f}")
    assert record("C2 bounds", bool(ok), "; ".join(parts) + f"; jump gaps within K_DY + 10h; {wall:.1f}s < 300s")


def test_c3_strategy_bound(curved_ladder):
    spec, sols, _ = curved_ladder
    worst = 0.0
    for sol in sols.values():
        for n in range(spec.m + 1):
            worst = max(worst, float(np.max(np.linalg.norm(sol.pi[n], axis=-1))))
    C_Pi = sols[0.1].ledger.C_Pi
    assert record("C3 strategy bound", worst <= C_Pi + 1e-6, f"max |pi*| = {worst:.4f} <= C_Pi + 1e-6 = {C_Pi}")


@pytest.mark.parametrize("name", ["flat", "curved"])
def test_c4_martingale_certification(name):
    spec = builtin_scenario(name)
    sol = solve_chain(spec, spec.rho, newton=name == "curved")
    t0 = time.perf_counter()
    ok, parts = True, []
    for strat in ("optimal", "zero", "scaled:1.5"):
        for n in sorted({0, spec.m}):
            rep = H.martingale_test(spec, sol, strat, n=n, checkpoints=CHECKPOINTS, paths=PATHS, seed=2024 + n,
                                    dt=DT, deterministic="exact")
            ok &= rep.passed
            z = max(abs(g) / s if s > 0 else 0.0 for g, s in zip(rep.gaps, rep.ses))
            tag = "det" if rep.deterministic else f"max|gap|/SE={z:.2f}"
            parts.append(f"{strat}/n={n}/{rep.kind[:5]} {'ok' if rep.passed else 'X'} ({tag})")
    wall = time.perf_counter() - t0
    ok &= wall < 600
    assert record(f"C4 martingale [{name}]", bool(ok), "; ".join(parts) + f"; {wall:.0f}s < 600s")


def test_c5_decomposition_identity():
    spec = builtin_scenario("flat")
    sol = solve_chain(spec, spec.rho)
    ok, parts = True, []
    for n in (0, spec.m):
        rep = H.decomposition_identity_test(spec, sol, n, s=1.0, paths=PATHS, seed=77 + n, dt=DT)
        ok &= rep.passed and abs(rep.rel_gap) <= 3 * rep.rel_se
        parts.append(f"n={n} rel_gap={rep.rel_gap:+.2e} 3SE={3 * rep.rel_se:.2e}")
    assert record("C5 decomposition", bool(ok), "; ".join(parts))


def test_c6_ergodic_and_growth():
    spec = builtin_scenario("flat")
    t0 = time.perf_counter()
    erg = ergodic_continuation(spec)
    res = ergodic_residual(spec, erg)
    trace = max(abs(v + 0.005) for v in erg.varrho_trace)
    rep = H.growth_rate_estimate(spec, erg, horizons=(50.0,), paths=PATHS, seed=5, dt=1e-2)
    wall = time.perf_counter() - t0
    est, se = rep.estimates[0], rep.ses[0]
    tol = max(3 * se, 5e-4)
    ok = (abs(erg.varrho + 0.005) <= 1e-6 and trace <= 1e-6 and abs(est - erg.varrho) <= tol
          and res.sup_all <= 1e-5 and wall < 900)
    assert record("C6 ergodic/growth", ok,
                  f"varrho={erg.varrho:+.8f} (trace dev {trace:.1e}); T=50 rate {est:+.5f} +- {se:.1e} "
                  f"(tol {tol:.1e}); residual {res.sup_all:.1e} <= 1e-5; {wall:.0f}s < 900s")


@pytest.fixture(scope="module")
def refinement():
    return refinement_study(builtin_scenario("curved"), sizes=(512, 1024, 2048))


def test_c7_grid_convergence(refinement):
    r = refinement.ratios[0]
    ok = bool(np.all(r <= 4.0))
    detail = ", ".join(f"y{n}: {d0:.3e} vs 4x{d1:.3e} (ratio {q:.4f})"
                       for n, (d0, d1, q) in enumerate(zip(refinement.diffs[0], refinement.diffs[1], r)))
    assert record("C7 grid convergence ||y512-y1024|| <= 4||y1024-y2048||", ok, detail)


def test_c7_observed_order(refinement):
    p = refinement.orders[0]
    ok = bool(np.all((p >= 1.9) & (p <= 2.1)))
    assert record("C7b observed order", ok, ", ".join(f"y{n}: p={q:.3f}" for n, q in enumerate(p)) + " in [1.9, 2.1]")


def test_c8_survival_density():
    dd = DefaultDensity.renewal([1.0, 1.0])
    t = math.log(2.0)
    closed = abs(survival_density(dd, 0, t) - 0.5)
    quad = abs(survival_density(dd, 0, t, method="quadrature") - 0.5)
    tails = H.default_tail_check(builtin_scenario("flat"), times=(0.5, 1.0, 2.0), paths=PATHS, seed=8)
    ok = closed <= 1e-10 and quad <= 1e-6 and tails.passed
    assert record("C8 survival density", ok,
                  f"closed err {closed:.1e} <= 1e-10; quadrature err {quad:.1e} <= 1e-6; MC tails within 3SE: "
                  f"{tails.passed}")
