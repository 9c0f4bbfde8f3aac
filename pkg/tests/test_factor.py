import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from fdbsde.defaults import DefaultDraw
from fdbsde.errors import DomainError
from fdbsde.factor import (apply_jump, ergodic_coupling_check, exponential_moment_probe, simulate_factor,
                           simulate_factor_path)

from conftest import raw_scenario, variant
from fdbsde.scenario import scenario_from_dict


def test_zero_noise_is_linear_ode(flat):
    dt = 1e-3
    seg = simulate_factor(flat, 0, [2.0], 0.0, 5.0, dt, 0, noise=False)
    exact = 2.0 * math.exp(-5.0)
    # Euler error for phi' = -phi is about 5 dt exact / 2
    assert abs(seg.values[-1, 0] - exact) <= 5.0 * dt * exact


def test_nonpositive_dt(flat):
    with pytest.raises(DomainError):
        simulate_factor(flat, 0, [0.0], 0.0, 1.0, 0.0, 0)


def test_same_seed_same_segment(flat):
    a = simulate_factor(flat, 1, [0.3], 0.0, 1.0, 0.01, 99)
    b = simulate_factor(flat, 1, [0.3], 0.0, 1.0, 0.01, 99)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.dW, b.dW)


def test_apply_jump(flat, curved):
    assert apply_jump(flat, 0, np.array([1.7]))[0] == 1.7
    raw = raw_scenario("flat")
    raw["jump_maps"] = [{"kind": "constant", "value": [0.5]}]
    assert apply_jump(scenario_from_dict(raw), 0, np.array([1.0]))[0] == pytest.approx(1.5)
    with pytest.raises(DomainError):
        apply_jump(flat, 1, np.array([0.0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_apply_jump_lipschitz(a, b):
    raw = raw_scenario("curved")
    raw["jump_maps"] = [{"kind": "tanh", "c": [0.1], "s": [0.3], "a": [2.0]}]
    spec = scenario_from_dict(raw)
    C = spec.jumps[0].lipschitz()
    ja, jb = apply_jump(spec, 0, np.array([a])), apply_jump(spec, 0, np.array([b]))
    assert abs(ja[0] - jb[0]) <= (1 + C) * abs(a - b) + 1e-12


def test_path_stitching(curved):
    draw = DefaultDraw(np.array([0.37]), np.array([0]))
    path = simulate_factor_path(curved, draw, [0.0], 1.0, 0.01, 5)
    assert len(path.segments) == 2
    assert path.stitching_errors(curved) == [0.0]
    assert path.segments[1].values[0, 0] == pytest.approx(path.segments[0].values[-1, 0] + 0.2, abs=0)


def test_coupling_equality_case(flat):
    rep = ergodic_coupling_check(flat, 0, [1.0], [-0.5], 5.0, 1e-3, 3)
    assert rep.passed
    assert rep.sup_ratio == pytest.approx(1.0, abs=1e-2)


def test_coupling_faster_contraction():
    spec = variant("flat", factor_drifts=[{"kind": "ou", "A": [[2.0]]}] * 2)
    rep = ergodic_coupling_check(spec, 0, [1.0], [-0.5], 5.0, 1e-3, 3)
    assert rep.passed and rep.ratio[-1] < 0.01


def test_coupling_needs_distinct_points(flat):
    with pytest.raises(DomainError):
        ergodic_coupling_check(flat, 0, [1.0], [1.0], 1.0, 0.01, 0)


def _ou_moment(c, v):
    # E e^{c|X|} for X ~ N(0, v)
    return 2 * math.exp(c * c * v / 2) * norm.cdf(c * math.sqrt(v))


def test_moment_probe_stabilizes_to_ou_oracle(flat):
    c = 0.5
    rep = exponential_moment_probe(flat, 0, c, [5.0, 10.0, 20.0], 20_000, 1, dt=0.01)
    assert rep.stabilized
    v = 1.0 / 2.0  # kappa^2 / (2A)
    assert abs(rep.upper[-1] - _ou_moment(c, v)) <= 3 * rep.upper_se[-1] + 0.01 * _ou_moment(c, v)
    assert np.all(rep.lower >= 1.0 / rep.upper - 1e-12)


def test_moment_probe_c_zero(flat):
    rep = exponential_moment_probe(flat, 0, 0.0, [1.0, 2.0], 100, 1, dt=0.05)
    np.testing.assert_allclose(rep.upper, 1.0)
    np.testing.assert_allclose(rep.lower, 1.0)


def test_moment_probe_rejects_negative_c(flat):
    with pytest.raises(DomainError):
        exponential_moment_probe(flat, 0, -1.0, 1.0, 10, 0)


@settings(max_examples=10, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.integers(0, 1000))
def test_shared_noise_contraction(a, b, seed):
    spec = variant("curved")
    if abs(a - b) < 1e-6:
        return
    rep = ergodic_coupling_check(spec, 0, [a], [b], 2.0, 1e-2, seed)
    assert rep.passed
