import math

import numpy as np
import pytest
from scipy.optimize import brentq

from fdbsde.errors import AssumptionError, NumericalError
from fdbsde.grid import Grid
from fdbsde.scenario import builtin_scenario, compute_constants
from fdbsde.solver import (ErgodicSolution, ergodic_continuation, ergodic_residual, jump_gap,
                           solve_chain, solve_regime, write_fields_csv)

from conftest import variant, zero_market


def flat_y0(rho=0.1, y1=None):
    """Scalar oracle: rho y + 0.02 = e^{y1 - y} with y1 = -0.005/rho."""
    y1 = -0.005 / rho if y1 is None else y1
    return brentq(lambda y: rho * y + 0.02 - math.exp(y1 - y), -50, 50, xtol=1e-15, rtol=1e-15)


def test_flat_oracle_root():
    assert flat_y0() == pytest.approx(1.642, abs=1e-3)


def test_flat_chain(flat_solution):
    grid = flat_solution.grid
    mask = grid.interior_mask()
    assert np.max(np.abs(flat_solution.y[1][mask] + 0.05)) <= 1e-4
    assert np.max(np.abs(flat_solution.y[0][mask] - flat_y0())) <= 1e-4
    assert np.max(np.abs(flat_solution.z[0])) <= 1e-10
    assert np.max(np.abs(flat_solution.z[1])) <= 1e-10
    assert flat_solution.bounds_passed


def test_flat_rho_doubled(flat):
    sol = solve_chain(flat, 0.2)
    assert np.max(np.abs(sol.y[1] + 0.025)) <= 1e-6
    assert np.max(np.abs(sol.y[0] - flat_y0(0.2))) <= 1e-6


def test_zero_market_chain():
    spec = zero_market(weight=1.0)
    sol = solve_chain(spec, spec.rho)
    root = brentq(lambda y: 0.1 * y - math.exp(-y), -10, 50, xtol=1e-15)
    assert np.max(np.abs(sol.y[1])) <= 1e-12
    assert np.max(np.abs(sol.y[0] - root)) <= 1e-6


def test_three_regime_chain():
    spec = builtin_scenario("flat2")
    sol = solve_chain(spec, spec.rho)
    y2 = -0.05
    y1 = brentq(lambda y: 0.1 * y + 0.005 - math.exp(y2 - y), -50, 50, xtol=1e-15)
    y0 = flat_y0(0.1, y1)
    for n, target in enumerate((y0, y1, y2)):
        assert np.max(np.abs(sol.y[n] - target)) <= 1e-6


def test_regime_needs_next_field(flat):
    with pytest.raises(ValueError):
        solve_regime(flat, 0, 0.1)


def test_nonconvergence_reports_history(curved):
    with pytest.raises(NumericalError) as info:
        solve_regime(curved, 1, 0.1, grid=Grid.from_spec(curved, 64), tol=1e-14, max_steps=2)
    assert len(info.value.history) >= 1 and info.value.best is not None


def test_bounds_curved_single_rho(curved_solution):
    assert all(b.passed is not False for b in curved_solution.bounds)
    L = curved_solution.ledger
    mask = curved_solution.grid.interior_mask()
    assert np.max(jump_gap(curved_solution, 1)[mask]) <= L.K_DeltaY(1) + 10 * curved_solution.grid.h[0]


def test_lipschitz_over_grid_pairs(curved_solution):
    sol = curved_solution
    L = sol.ledger
    grid = sol.grid
    mask = grid.interior_mask()
    x = grid.coords[mask, 0]
    eps = 10 * grid.h[0]
    for n in range(2):
        y = sol.y[n][mask]
        dx = np.abs(x[:, None] - x[None, :])
        dy = np.abs(y[:, None] - y[None, :])
        assert np.all(dy <= (L.K_Z[n] + eps) * dx + 1e-12)


def test_comparison_in_risk_premium():
    lo = variant("flat")
    hi = variant("flat", market=[{"alpha": [0.2], "sigma": [[1.0]], "beta": [0.0]},
                                 {"alpha": [0.15], "sigma": [[1.0]], "beta": [0.0]}])
    a = solve_chain(lo, lo.rho, check_bounds=False)
    b = solve_chain(hi, hi.rho, check_bounds=False)
    assert np.all(b.y[1] <= a.y[1] + 1e-12)


def test_fields_csv(tmp_path, flat_solution):
    path = write_fields_csv(flat_solution, tmp_path / "f.csv")
    data = np.genfromtxt(path, delimiter=",", names=True)
    assert data.dtype.names == ("phi1", "y0", "z0_1", "y1", "z1_1")
    np.testing.assert_allclose(data["y1"], flat_solution.y[1], rtol=0, atol=0)


@pytest.fixture(scope="module")
def flat_ergodic(flat):
    return ergodic_continuation(flat)


def test_flat_ergodic_constant(flat_ergodic):
    assert isinstance(flat_ergodic, ErgodicSolution)
    assert flat_ergodic.converged
    assert abs(flat_ergodic.varrho + 0.005) <= 1e-6
    assert max(abs(v + 0.005) for v in flat_ergodic.varrho_trace) <= 1e-6
    # normalisation ybar^0(ref) = 0
    grid = flat_ergodic.grid
    assert abs(grid.interp(flat_ergodic.ybar[0], np.zeros((1, 1)))[0]) <= 1e-12


def test_flat_ergodic_lower_bound_stays_positive(flat_ergodic):
    trace = np.array(flat_ergodic.lower_bound_trace)[:, 0]
    assert np.all(trace > 0.01)
    # in the limit the regime-0 equation reads varrho = -0.02 + e^{ybar^1 - ybar^0}
    assert trace[-1] == pytest.approx(0.015, rel=1e-4)


def test_flat_ergodic_residual(flat, flat_ergodic):
    rep = ergodic_residual(flat, flat_ergodic)
    assert rep.sup_all <= 1e-5


def test_residual_shift_by_delta(flat, flat_ergodic):
    base = ergodic_residual(flat, flat_ergodic)
    delta = 3e-3
    shifted = ergodic_residual(flat, flat_ergodic, varrho=flat_ergodic.varrho + delta)
    for a, b in zip(base.sup, shifted.sup):
        assert b == pytest.approx(a + delta, abs=1e-7)


def test_residual_spike_is_local(flat, flat_ergodic):
    import copy
    erg = copy.copy(flat_ergodic)
    k = flat_ergodic.grid.size // 2 + 7
    erg.ybar = [y.copy() for y in flat_ergodic.ybar]
    erg.ybar[1][k] += 0.01
    rep = ergodic_residual(flat, erg, fraction=1.0)
    r = rep.fields[1]
    hot = np.flatnonzero(r > 1e-4)
    assert hot.size > 0 and np.all(np.abs(hot - k) <= 1)


def test_zero_premium_ergodic_constant():
    spec = zero_market(weight=0.0)
    erg = ergodic_continuation(spec)
    assert erg.varrho == pytest.approx(0.0, abs=1e-12)


def test_zero_premium_with_coupling_has_no_limit():
    # y^0 ~ ln(1/rho): the ladder must not claim convergence
    spec = zero_market(weight=1.0)
    with pytest.raises(NumericalError):
        ergodic_continuation(spec)


def test_monotonicity_check_gates_ladder(curved):
    assert not compute_constants(curved).extra_ergodic_alpha
    with pytest.raises(AssumptionError):
        ergodic_continuation(curved)


def test_override_certifies_top_regime(curved):
    erg = ergodic_continuation(curved, override=True)
    assert erg.certified_regimes == (1,)
    rep = ergodic_residual(curved, erg)
    assert rep.sup[1] <= 1e-5
