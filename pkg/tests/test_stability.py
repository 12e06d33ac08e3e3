import math

import pytest

from weakkam import TorusGrid, builtin, legendre
from weakkam.errors import ConfigError
from weakkam.expr import parse
from weakkam.grid import constant_field, field_from_expr
from weakkam import stability as st


@pytest.fixture(scope="module")
def contact_pos():
    g = TorusGrid(64)
    spec = builtin("linear_contact", {"a": 1.0, "V": 0})
    return g, spec, legendre(spec, g, 33, 33)


@pytest.fixture(scope="module")
def contact_neg():
    g = TorusGrid(64)
    spec = builtin("linear_contact", {"a": -1.0, "V": 0})
    return g, spec, legendre(spec, g, 33, 33)


def test_check_condition_constant_shift_stable(contact_pos):
    g, spec, lt = contact_pos
    um = constant_field(g, 0.0)
    rep = st.check_condition(spec, um, "A3", lt=lt)
    assert rep.verdict == "holds"
    assert rep.zeta_found == 0.25
    # constant shift of a Hamiltonian shifts its critical value by the same amount
    assert rep.c_values[0.25] == pytest.approx(-0.25, abs=5e-3)
    assert rep.A_estimate == pytest.approx(1.0, abs=1e-6)


def test_check_condition_constant_shift_unstable(contact_neg):
    g, spec, lt = contact_neg
    um = constant_field(g, 0.0)
    rep = st.check_condition(spec, um, "A4", lt=lt)
    assert rep.verdict == "holds"
    assert rep.c_values[0.25] == pytest.approx(-0.25, abs=5e-3)
    assert rep.A_estimate == pytest.approx(-1.0, abs=1e-6)


def test_stability_and_instability_never_both_hold(contact_pos, contact_neg):
    for g, spec, lt in (contact_pos, contact_neg):
        um = constant_field(g, 0.0)
        r3 = st.check_condition(spec, um, "A3", lt=lt, with_A_estimate=False)
        r4 = st.check_condition(spec, um, "A4", lt=lt, with_A_estimate=False)
        assert not (r3.verdict == "holds" and r4.verdict == "holds")


def test_example_instance_condition_value(example_setup):
    # the worked computation gives the shifted critical value -zeta*theta
    rep = st.check_condition(example_setup["spec"], example_setup["u_minus"],
                             "A3", lt=example_setup["lt"])
    assert rep.verdict == "holds"
    zeta = rep.zeta_found
    assert rep.c_values[zeta] == pytest.approx(-zeta * 0.5, abs=5e-3)
    assert rep.A_estimate == pytest.approx(0.5, abs=5e-3)


def test_decay_exponent_closed_form(contact_pos):
    g, spec, lt = contact_pos
    um = constant_field(g, 0.0)
    slope = st.decay_exponent(spec, um, delta=0.1, T=6.0, dt=1e-3, lt=lt)
    assert slope == pytest.approx(-1.0, abs=5e-2)


def test_decay_window_shrinks_at_noise_floor(contact_pos):
    g, spec, lt = contact_pos
    um = constant_field(g, 0.0)
    with pytest.warns(UserWarning, match="noise floor"):
        slope = st.decay_exponent(spec, um, delta=1e-13, T=16.0, dt=2e-3, lt=lt)
    assert slope <= 0.0


def test_decay_exponent_neutral_for_u_independent():
    g = TorusGrid(64)
    spec = builtin("eikonal", {"V": 0})
    lt = legendre(spec, g, 33, 33)
    um = constant_field(g, 0.0)
    slope = st.decay_exponent(spec, um, delta=0.1, T=4.0, dt=1e-3, lt=lt)
    assert slope == pytest.approx(0.0, abs=5e-2)


def test_instability_probe_escape_times(contact_neg):
    g, spec, lt = contact_neg
    um = constant_field(g, 0.0)
    pr = st.instability_probe(spec, um, eps=0.01, Delta_target=0.5, T=8.0,
                              dt=1e-3, lt=lt)
    assert pr.escaped
    assert pr.t_escape == pytest.approx(math.log(50), abs=0.1)


def test_instability_probe_negative_result(contact_pos):
    g, spec, lt = contact_pos
    um = constant_field(g, 0.0)
    pr = st.instability_probe(spec, um, eps=0.01, Delta_target=0.5, T=4.0,
                              dt=1e-3, lt=lt)
    assert not pr.escaped
    assert pr.devs[-1] < 0.01  # deviation decays


def test_instability_probe_stable_example(example_setup):
    pr = st.instability_probe(example_setup["spec"], example_setup["u_minus"],
                              eps=0.01, Delta_target=0.1, T=6.0, dt=1e-3,
                              lt=example_setup["lt"])
    assert not pr.escaped


def test_probe_validation(contact_pos):
    g, spec, lt = contact_pos
    um = constant_field(g, 0.0)
    with pytest.raises(ValueError):
        st.instability_probe(spec, um, eps=1.5, Delta_target=2.0, T=1.0, dt=1e-3, lt=lt)
    with pytest.raises(ValueError):
        st.instability_probe(spec, um, eps=0.1, Delta_target=0.05, T=1.0, dt=1e-3, lt=lt)


def test_basin_global_contraction(contact_pos):
    g, spec, lt = contact_pos
    um = constant_field(g, 0.0)
    assert st.basin_estimate(spec, um, T=12.0, dt=2e-3, delta_hi=1.0, lt=lt) == 1.0


def test_basin_zero_for_unstable(contact_neg):
    g, spec, lt = contact_neg
    um = constant_field(g, 0.0)
    assert st.basin_estimate(spec, um, T=12.0, dt=2e-3, delta_hi=1.0, lt=lt) == 0.0


def test_basin_positive_for_example(example_setup):
    basin = st.basin_estimate(example_setup["spec"], example_setup["u_minus"],
                              T=16.0, dt=2e-3, delta_hi=0.4,
                              lt=example_setup["lt"])
    assert basin > 0.0  # recorded for regression; no reference value asserted


def test_a3_implies_half_rate_decay(contact_pos):
    g, spec, lt = contact_pos
    um = constant_field(g, 0.0)
    rep = st.check_condition(spec, um, "A3", lt=lt)
    assert rep.verdict == "holds"
    basin = st.basin_estimate(spec, um, T=12.0, dt=2e-3, delta_hi=1.0, lt=lt)
    slope = st.decay_exponent(spec, um, delta=basin / 2, T=6.0, dt=1e-3, lt=lt)
    assert slope <= -rep.A_estimate / 2 + 5e-2


def test_corollary_holds():
    g = TorusGrid(64)
    a_field = field_from_expr(g, parse("2 + sin(2*pi*x)"))
    rep = st.check_corollary_a(parse("p^2 + cos(2*pi*x) - 1"), a_field, m=33, k=33)
    assert rep.verdict == "holds"
    assert rep.A_estimate == pytest.approx(2.0, abs=0.3)  # a near the contact point


def test_corollary_fails_when_a_vanishes_on_aubry():
    g = TorusGrid(64)
    a_field = field_from_expr(g, parse("sin(pi*x)^2"))   # vanishes at x = 0
    rep = st.check_corollary_a(parse("p^2"), a_field, m=33, k=33)
    assert rep.verdict == "fails"


def test_corollary_fails_for_zero_a():
    g = TorusGrid(64)
    rep = st.check_corollary_a(parse("p^2 + cos(2*pi*x) - 1"),
                               constant_field(g, 0.0), m=33, k=33)
    assert rep.verdict == "fails"


def test_corollary_rejects_negative_a():
    g = TorusGrid(64)
    with pytest.raises(ConfigError):
        st.check_corollary_a(parse("p^2"), constant_field(g, -0.1), m=33, k=33)


def test_report_serializes(contact_pos):
    g, spec, lt = contact_pos
    rep = st.check_condition(spec, constant_field(g, 0.0), "A3", lt=lt)
    doc = rep.to_dict()
    assert doc["verdict"] == "holds"
    assert isinstance(doc["c_values"], dict)
