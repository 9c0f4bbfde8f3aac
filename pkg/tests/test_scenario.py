import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdbsde.errors import ParseError, SchemaError, SemanticError
from fdbsde.scenario import (check_dissipativity, compute_constants, load_scenario, scenario_from_dict,
                             validation_sample)

from conftest import raw_scenario


def test_load_round_trip(tmp_path):
    path = tmp_path / "flat.json"
    path.write_text(json.dumps(raw_scenario("flat")))
    spec = load_scenario(path)
    assert (spec.m, spec.d, spec.gamma, spec.rho) == (1, 1, 1.0, 0.1)
    assert spec.C_g == 1.0
    np.testing.assert_allclose(spec.alpha[0](np.zeros((1, 1))), [[0.2]])
    np.testing.assert_allclose(spec.alpha[1](np.zeros((1, 1))), [[0.1]])


def test_arity_error_names_field():
    raw = raw_scenario("flat2")
    raw["factor_drifts"] = raw["factor_drifts"][:2]
    with pytest.raises(SchemaError, match="factor_drifts"):
        scenario_from_dict(raw)


def test_negative_weight_is_semantic_error():
    raw = raw_scenario("flat")
    raw["marks"]["weights"] = [[-0.5]]
    with pytest.raises(SemanticError, match="weights"):
        scenario_from_dict(raw)


def test_nonpositive_gamma_rejected():
    raw = raw_scenario("flat")
    raw["gamma"] = 0.0
    with pytest.raises(SemanticError, match="gamma"):
        scenario_from_dict(raw)


def test_beta_at_minus_one_rejected():
    raw = raw_scenario("flat")
    raw["market"][0]["beta"] = [-1.0]
    with pytest.raises(SemanticError, match="beta"):
        scenario_from_dict(raw)


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_scenario(path)


def test_K_Y_example():
    raw = raw_scenario("flat")
    raw["gamma"] = 2.0
    raw["market"][0]["alpha"] = [3.0]
    raw["constraints"] = [{"kind": "box", "c": 10.0}] * 2
    L = compute_constants(scenario_from_dict(raw))
    assert L.K_Y == pytest.approx(2.25, abs=1e-15)


def test_constant_coefficients_give_zero_C_phi(flat):
    L = compute_constants(flat)
    assert L.C_phi == 0.0
    assert L.K_Z == (0.0, 0.0)
    assert L.K_Y == 1.0


def _kz_scenario():
    raw = raw_scenario("flat")
    tanh_alpha = {"kind": "tanh", "c": [0.0], "s": [0.1], "a": [1.0]}
    raw["market"][0]["alpha"] = tanh_alpha
    raw["market"][1]["alpha"] = tanh_alpha
    raw["market"][0]["beta"] = {"kind": "tanh", "c": [0.0], "s": [0.05], "a": [1.0]}
    raw["jump_maps"] = [{"kind": "constant", "value": [0.3]}]
    raw["constraints"] = [{"kind": "box", "c": 1.0}] * 2
    return scenario_from_dict(raw)


def test_K_Z_example():
    # C_alpha = 0.1, K_alpha = 0.1, C_Pi = 1 -> C_phi = 2 C_alpha = 0.2; C_Pi C_beta = 0.05, C_varphi = 0
    L = compute_constants(_kz_scenario())
    assert L.C_phi == pytest.approx(0.2, abs=1e-12)
    assert L.K_Z[0] == pytest.approx(0.30, abs=1e-12)
    assert L.K_Z[1] == pytest.approx(0.25, abs=1e-12)


def test_K_DY_downward_recursion_m2():
    spec = scenario_from_dict(raw_scenario("flat2"))
    L = compute_constants(spec)
    # constant coefficients: K_Z = 0, so C_2 = 0 and C_1 = e^{gamma K_DY^2}/gamma
    assert L.K_DY[1] == pytest.approx(-1.0)
    assert L.K_DY[0] == pytest.approx(math.exp(-1.0) - 1.0)


def test_ledger_deterministic(curved):
    assert compute_constants(curved).to_dict() == compute_constants(curved).to_dict()


def test_dissipativity_examples(flat):
    rep = check_dissipativity(flat, sample_count=500, rng_seed=1)
    assert rep.passed
    np.testing.assert_allclose(rep.worst_ratio, [-1.0, -1.0], atol=1e-12)
    raw = raw_scenario("flat")
    raw["C_g"] = 2.0
    rep = check_dissipativity(scenario_from_dict(raw), sample_count=500, rng_seed=1)
    assert not rep.passed
    np.testing.assert_allclose(rep.margin, [1.0, 1.0], atol=1e-12)


def test_D_g_constant_offset():
    raw = raw_scenario("flat")
    raw["factor_drifts"][1] = {"kind": "ou", "A": [[1.0]], "c": [0.3]}
    rep = check_dissipativity(scenario_from_dict(raw), sample_count=100, rng_seed=0)
    assert rep.D_g == pytest.approx(0.3, abs=1e-12)


def test_validation_sample_inside_domain(flat):
    lo, hi = flat.domain_bounds()
    pts = validation_sample(flat)
    assert np.all(pts >= lo) and np.all(pts <= hi)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(1.2, 8.0), min_size=2, max_size=4, unique=True))
def test_K_DY_nonincreasing_in_C_g(cgs):
    base = raw_scenario("curved")
    vals = []
    for cg in sorted(cgs):
        raw = copy.deepcopy(base)
        raw["C_g"] = cg
        raw["factor_drifts"] = [{"kind": "ou", "A": [[cg]]}] * 2
        L = compute_constants(scenario_from_dict(raw))
        if not L.cphi_cg:
            continue
        vals.append(L.K_DY[0])
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(1.0, 3.0))
def test_larger_boxes_do_not_shrink_constants(c, factor):
    raw = raw_scenario("curved")
    raw["C_g"] = 50.0
    raw["factor_drifts"] = [{"kind": "ou", "A": [[50.0]]}] * 2
    out = []
    for cc in (c, c * factor):
        r = copy.deepcopy(raw)
        r["constraints"] = [{"kind": "box", "c": cc}] * 2
        out.append(compute_constants(scenario_from_dict(r)))
    assert out[1].C_phi >= out[0].C_phi - 1e-12
    assert all(b >= a - 1e-12 for a, b in zip(out[0].K_Z, out[1].K_Z))
